//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`train.k1`) and resolve in order: built-in defaults, the
//! config file, `PICIE_*` environment variables, then `--set key=value`. The
//! resolved snapshot is written as TOML and its SHA-256 identifies the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use picie_core::dataio::{parse_label_remap, DatasetManifest};
use picie_core::features::BackboneKind;
use picie_core::trainer::CrossLoss;
use picie_core::{ExtractorConfig, Method, SyntheticSpec, TrainConfig};
use sha2::{Digest, Sha256};
use toml::Value;

pub const ENV_PREFIX: &str = "PICIE_";

/// Invalid or unresolvable configuration. Always a usage error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Res<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Str,
    Int,
    Float,
    Bool,
}

/// (key, kind, default). A `None` default leaves the key unset.
const KEYS: &[(&str, Kind, Option<&str>)] = &[
    ("seed", Kind::Int, Some("0")),
    ("method", Kind::Str, Some("picie")),
    ("out_dir", Kind::Str, Some("runs/default")),
    ("deterministic", Kind::Bool, Some("true")),
    ("data.kind", Kind::Str, Some("synthetic")),
    ("data.root", Kind::Str, None),
    ("data.split", Kind::Str, Some("train")),
    ("data.resolution", Kind::Int, Some("320")),
    ("data.n_classes", Kind::Int, Some("27")),
    ("data.label_remap", Kind::Str, None),
    ("data.ignore", Kind::Int, Some("255")),
    ("synthetic.n_images", Kind::Int, Some("200")),
    ("synthetic.side", Kind::Int, Some("64")),
    ("synthetic.n_classes", Kind::Int, Some("4")),
    ("synthetic.regions_min", Kind::Int, Some("4")),
    ("synthetic.regions_max", Kind::Int, Some("8")),
    ("synthetic.hue_range", Kind::Float, Some("0.5")),
    ("synthetic.brightness_range", Kind::Float, Some("0.25")),
    ("synthetic.saturation", Kind::Float, Some("0.15")),
    ("synthetic.contrast_range", Kind::Float, Some("0.25")),
    ("synthetic.texture_amplitude", Kind::Float, Some("0.9")),
    ("synthetic.texture_period", Kind::Int, Some("8")),
    ("synthetic.noise", Kind::Float, Some("0.02")),
    ("synthetic.seed", Kind::Int, None),
    ("model.backbone", Kind::Str, Some("tiny")),
    ("model.feature_dim", Kind::Int, Some("128")),
    ("model.stride", Kind::Int, Some("4")),
    ("model.pretrained", Kind::Str, None),
    ("train.k1", Kind::Int, Some("27")),
    ("train.k2", Kind::Int, Some("100")),
    ("train.epochs", Kind::Int, None),
    ("train.batch_size", Kind::Int, Some("8")),
    ("train.lr", Kind::Float, Some("0.001")),
    ("train.beta1", Kind::Float, Some("0.9")),
    ("train.beta2", Kind::Float, Some("0.999")),
    ("train.eps", Kind::Float, Some("1e-8")),
    ("train.weight_decay", Kind::Float, Some("0.0")),
    ("train.augment", Kind::Bool, Some("true")),
    ("train.cross_loss", Kind::Str, Some("prototype")),
    ("train.kmeans_init_batches", Kind::Int, None),
    ("train.kmeans_batch_size", Kind::Int, None),
    ("train.kmeans_update_period", Kind::Int, None),
    ("eval.partitions", Kind::Str, None),
    ("eval.robustness", Kind::Bool, Some("false")),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(_, kind, _)| kind)
}

pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _, _)| *k)
}

fn parse_text(key: &str, kind: Kind, text: &str) -> Res<Value> {
    let bad = |what: &str| ConfigError(format!("key `{key}`: expected {what}, got `{text}`"));
    Ok(match kind {
        Kind::Str => Value::String(text.to_owned()),
        Kind::Int => Value::Integer(text.trim().parse().map_err(|_| bad("an integer"))?),
        Kind::Float => Value::Float(text.trim().parse().map_err(|_| bad("a number"))?),
        Kind::Bool => Value::Boolean(text.trim().parse().map_err(|_| bad("true or false"))?),
    })
}

fn coerce(key: &str, kind: Kind, v: Value) -> Res<Value> {
    match (kind, v) {
        (Kind::Str, v @ Value::String(_))
        | (Kind::Int, v @ Value::Integer(_))
        | (Kind::Float, v @ Value::Float(_))
        | (Kind::Bool, v @ Value::Boolean(_)) => Ok(v),
        (Kind::Float, Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (_, other) => err(format!("key `{key}`: wrong type {}", other.type_str())),
    }
}

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other)),
        }
    }
}

/// Accumulates key/value layers; later layers win.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    values: BTreeMap<String, Value>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .filter_map(|&(k, kind, d)| d.map(|d| (k.to_owned(), parse_text(k, kind, d).expect("valid default"))))
            .collect();
        Self { values }
    }
}

impl ConfigBuilder {
    pub fn set(&mut self, key: &str, text: &str) -> Res<()> {
        let kind = kind_of(key).ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))?;
        self.values.insert(key.to_owned(), parse_text(key, kind, text)?);
        Ok(())
    }

    /// `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Res<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn merge_toml(&mut self, text: &str, origin: &str) -> Res<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("{origin}: {}", e.message())))?;
        let mut flat = Vec::new();
        flatten("", table, &mut flat);
        for (key, v) in flat {
            let kind = kind_of(&key).ok_or_else(|| ConfigError(format!("{origin}: unknown config key `{key}`")))?;
            self.values.insert(key.clone(), coerce(&key, kind, v)?);
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Res<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_toml(&text, &path.display().to_string())
    }

    /// `PICIE_TRAIN__K1=8` sets `train.k1`.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Res<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_ascii_lowercase().replace("__", "."), v)))
            .collect();
        found.sort();
        for (key, v) in found {
            if kind_of(&key).is_none() {
                return err(format!(
                    "unknown config key `{key}` (from environment variable {ENV_PREFIX}{})",
                    key.to_ascii_uppercase().replace('.', "__")
                ));
            }
            self.set(&key, &v)?;
        }
        Ok(())
    }

    pub fn build(self) -> Res<RunConfig> {
        RunConfig::from_values(self.values)
    }
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Folder(DatasetManifest),
}

impl DataSource {
    pub fn n_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.n_classes,
            DataSource::Folder(m) => m.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    pub partitions: Vec<(String, Vec<usize>)>,
    pub robustness: bool,
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    values: BTreeMap<String, Value>,
}

struct Reader<'a>(&'a BTreeMap<String, Value>);

impl Reader<'_> {
    fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    fn opt_int(&self, key: &str) -> Res<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => err(format!("key `{key}`: expected a non-negative integer, got {v}")),
        }
    }

    fn int(&self, key: &str) -> Res<u64> {
        self.opt_int(key)?.ok_or_else(|| ConfigError(format!("key `{key}` is required")))
    }

    fn usize(&self, key: &str) -> Res<usize> {
        Ok(self.int(key)? as usize)
    }

    fn opt_usize(&self, key: &str) -> Res<Option<usize>> {
        Ok(self.opt_int(key)?.map(|v| v as usize))
    }

    fn float(&self, key: &str) -> Res<f64> {
        match self.get(key) {
            Some(Value::Float(f)) if f.is_finite() => Ok(*f),
            Some(v) => err(format!("key `{key}`: expected a finite number, got {v}")),
            None => err(format!("key `{key}` is required")),
        }
    }

    fn boolean(&self, key: &str) -> Res<bool> {
        match self.get(key) {
            Some(Value::Boolean(b)) => Ok(*b),
            _ => err(format!("key `{key}`: expected true or false")),
        }
    }

    fn opt_str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    fn str(&self, key: &str) -> Res<&str> {
        self.opt_str(key).ok_or_else(|| ConfigError(format!("key `{key}` is required")))
    }
}

fn field<T, E: fmt::Display>(key: &str, r: Result<T, E>) -> Res<T> {
    r.map_err(|e| ConfigError(format!("key `{key}`: {e}")))
}

impl RunConfig {
    fn from_values(values: BTreeMap<String, Value>) -> Res<Self> {
        let r = Reader(&values);
        let seed = r.int("seed")?;
        let data = match r.str("data.kind")? {
            "synthetic" => {
                let spec = SyntheticSpec {
                    n_images: r.usize("synthetic.n_images")?,
                    side: r.usize("synthetic.side")?,
                    n_classes: r.usize("synthetic.n_classes")?,
                    regions_per_image: (r.usize("synthetic.regions_min")?, r.usize("synthetic.regions_max")?),
                    hue_range: r.float("synthetic.hue_range")?,
                    brightness_range: r.float("synthetic.brightness_range")?,
                    saturation: r.float("synthetic.saturation")?,
                    contrast_range: r.float("synthetic.contrast_range")?,
                    texture_amplitude: r.float("synthetic.texture_amplitude")?,
                    texture_period: r.usize("synthetic.texture_period")?,
                    noise: r.float("synthetic.noise")?,
                    seed: r.opt_int("synthetic.seed")?.unwrap_or(seed),
                };
                field("synthetic", spec.validate())?;
                DataSource::Synthetic(spec)
            }
            "folder" => {
                let root = r
                    .opt_str("data.root")
                    .ok_or_else(|| ConfigError("key `data.root` is required when data.kind = \"folder\"".into()))?;
                let mut m = DatasetManifest::new(root, r.str("data.split")?, r.usize("data.resolution")?, r.usize("data.n_classes")?);
                m.ignore_value = r.int("data.ignore")? as u32;
                if let Some(path) = r.opt_str("data.label_remap") {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| ConfigError(format!("key `data.label_remap`: cannot read {path}: {e}")))?;
                    m.label_remap = Some(field("data.label_remap", parse_label_remap(&text))?);
                }
                DataSource::Folder(m)
            }
            other => return err(format!("key `data.kind`: expected synthetic or folder, got `{other}`")),
        };
        let extractor = ExtractorConfig {
            backbone: field("model.backbone", r.str("model.backbone")?.parse::<BackboneKind>())?,
            feature_dim: r.usize("model.feature_dim")?,
            stride: r.usize("model.stride")?,
            pretrained: r.opt_str("model.pretrained").map(PathBuf::from),
        };
        field("model", extractor.validate())?;
        let mut train = TrainConfig {
            method: field("method", r.str("method")?.parse::<Method>())?,
            k1: r.usize("train.k1")?,
            k2: r.usize("train.k2")?,
            epochs: r.opt_usize("train.epochs")?,
            batch_size: r.usize("train.batch_size")?,
            seed,
            augment: r.boolean("train.augment")?,
            cross_loss: match r.str("train.cross_loss")? {
                "prototype" => CrossLoss::Prototype,
                "mse" => CrossLoss::Mse,
                other => return err(format!("key `train.cross_loss`: expected prototype or mse, got `{other}`")),
            },
            kmeans_init_batches: r.opt_usize("train.kmeans_init_batches")?,
            kmeans_batch_size: r.opt_usize("train.kmeans_batch_size")?,
            kmeans_update_period: r.opt_usize("train.kmeans_update_period")?,
            ..TrainConfig::default()
        };
        train.optimizer.lr = r.float("train.lr")?;
        train.optimizer.beta1 = r.float("train.beta1")?;
        train.optimizer.beta2 = r.float("train.beta2")?;
        train.optimizer.eps = r.float("train.eps")?;
        train.optimizer.weight_decay = r.float("train.weight_decay")?;
        field("train", train.validate())?;
        let eval = EvalOptions {
            partitions: match r.opt_str("eval.partitions") {
                Some(s) => parse_partitions(s.split_whitespace())?,
                None => Vec::new(),
            },
            robustness: r.boolean("eval.robustness")?,
        };
        Ok(Self {
            seed,
            data,
            extractor,
            train,
            eval,
            out_dir: PathBuf::from(r.str("out_dir")?),
            deterministic: r.boolean("deterministic")?,
            values,
        })
    }

    /// Resolved configuration as TOML, one dotted key per line, sorted.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 of the snapshot, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.snapshot().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn value(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }
}

/// `name:0-14` or `name:0,3,5-7`.
pub fn parse_partition(spec: &str) -> Res<(String, Vec<usize>)> {
    let (name, ranges) = spec
        .split_once(':')
        .filter(|(n, r)| !n.is_empty() && !r.is_empty())
        .ok_or_else(|| ConfigError(format!("partition `{spec}`: expected name:ids, e.g. stuff:0-14")))?;
    let bad = || ConfigError(format!("partition `{spec}`: bad class range"));
    let mut ids = Vec::new();
    for part in ranges.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                ids.extend(a..=b);
            }
            None => ids.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok((name.to_owned(), ids))
}

pub fn parse_partitions<'a>(specs: impl IntoIterator<Item = &'a str>) -> Res<Vec<(String, Vec<usize>)>> {
    let parts = specs.into_iter().map(parse_partition).collect::<Res<Vec<_>>>()?;
    let mut names: Vec<&str> = parts.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return err(format!("partition `{}` given twice", w[0]));
    }
    Ok(parts)
}

/// Resolves defaults < file < environment < `--set` pairs.
pub fn resolve<I>(file: Option<&Path>, env: I, sets: &[String]) -> Res<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut b = ConfigBuilder::default();
    if let Some(path) = file {
        b.merge_file(path)?;
    }
    b.merge_env(env)?;
    for pair in sets {
        b.set_pair(pair)?;
    }
    b.build()
}
