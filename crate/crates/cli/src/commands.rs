use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use log::info;
use picie_core::clustering::{cluster_two_views, sample_records, ClusterOptions};
use picie_core::dataio::{generate_synthetic, load_and_preprocess};
use picie_core::eval::{
    default_palette, evaluate, identity_records, nearest_neighbors, predict_labels, render_majority_vote,
    robustness_eval, robustness_records, NeighborList,
};
use picie_core::trainer::{train, EpochEvent};
use picie_core::{Centroids, Checkpoint, Error as CoreError, Extractor, ImageSample};
use serde_json::{json, Value};

use crate::config::{ConfigError, DataSource, EvalOptions, RunConfig};

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn load_data(source: &DataSource) -> picie_core::Result<Vec<ImageSample>> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Folder(manifest) => load_and_preprocess(manifest),
    }
}

fn check_partitions(opts: &EvalOptions, n_classes: usize) -> Result<()> {
    for (name, ids) in &opts.partitions {
        if let Some(&bad) = ids.iter().find(|&&c| c >= n_classes) {
            return Err(ConfigError(format!("partition `{name}`: class {bad} outside 0..{n_classes}")).into());
        }
    }
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Metrics, optional partition blocks and optional robustness conditions.
pub fn eval_json(
    extractor: &Extractor,
    c: &Centroids,
    data: &[ImageSample],
    n_classes: usize,
    opts: &EvalOptions,
    seed: u64,
) -> Result<Value> {
    check_partitions(opts, n_classes)?;
    let report = evaluate(extractor, c, data, n_classes, &opts.partitions)?;
    let mut v = serde_json::to_value(&report)?;
    if opts.robustness {
        let rob = robustness_eval(extractor, c, data, n_classes, &robustness_records(data, seed))?;
        v["robustness"] = json!({
            "photometric": rob.photometric,
            "geometric": rob.geometric,
            "photometric_drop": rob.photometric_drop(),
            "geometric_drop": rob.geometric_drop(),
        });
    }
    Ok(v)
}

/// Runs training and fills the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    let ckpt_dir = dir.join("checkpoints");
    let pl_dir = dir.join("pseudolabels");
    for d in [&dir, &ckpt_dir, &pl_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(dir.join(SNAPSHOT_FILE), cfg.snapshot()).context("writing config snapshot")?;
    let hash = cfg.hash();
    let data = load_data(&cfg.data)?;
    info!("{} images, config {}", data.len(), &hash[..12]);
    let extractor = Extractor::new(cfg.extractor.clone(), cfg.seed)?;
    let mut reports = BufWriter::new(File::create(dir.join(REPORTS_FILE)).context("creating reports")?);
    let mut observer = |ev: EpochEvent| -> picie_core::Result<()> {
        let mut report = ev.report.clone();
        if cfg.deterministic {
            report.cluster_secs = 0.0;
            report.train_secs = 0.0;
        }
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(reports, "{line}").map_err(|e| CoreError::Format(format!("writing reports: {e}")))?;
        ev.checkpoint.save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", report.epoch)))?;
        for set in ev.pseudo_labels {
            set.save(&pl_dir.join(format!("epoch_{:03}_k{}.bin", report.epoch, set.k())))?;
        }
        Ok(())
    };
    let outcome = train(&data, extractor, &cfg.train, &hash, None, &mut observer)?;
    reports.flush()?;
    outcome.checkpoint.save(&ckpt_dir.join(FINAL_CHECKPOINT))?;
    let ex = outcome.checkpoint.extractor()?;
    let metrics = eval_json(&ex, outcome.checkpoint.eval_centroids()?, &data, cfg.data.n_classes(), &cfg.eval, cfg.seed)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    info!("accuracy {:.4} mIoU {:.4}", metrics["accuracy"], metrics["miou"]);
    Ok(dir)
}

/// Snapshot stored next to a run's checkpoints, if any.
pub fn snapshot_for(checkpoint: &Path) -> Option<PathBuf> {
    let run = checkpoint.parent()?.parent()?;
    let p = run.join(SNAPSHOT_FILE);
    p.is_file().then_some(p)
}

/// Loads a checkpoint and rejects it when its model or training settings
/// differ from the resolved configuration.
pub fn load_checked(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path, None)?;
    let mut diffs = Vec::new();
    for (section, a, b) in [
        ("model", serde_json::to_value(&ckpt.extractor)?, serde_json::to_value(&cfg.extractor)?),
        ("train", serde_json::to_value(&ckpt.train)?, serde_json::to_value(&cfg.train)?),
    ] {
        if let (Value::Object(a), Value::Object(b)) = (&a, &b) {
            diffs.extend(a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| format!("{section}.{k}")));
        }
    }
    if !diffs.is_empty() {
        return Err(CoreError::Checkpoint(format!(
            "{} does not match the configuration (differs in {})",
            path.display(),
            diffs.join(", ")
        ))
        .into());
    }
    Ok(ckpt)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub render: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Value> {
    let ckpt = load_checked(&args.checkpoint, cfg)?;
    let ex = ckpt.extractor()?;
    let c = ckpt.eval_centroids()?;
    let data = load_data(&cfg.data)?;
    let n_classes = cfg.data.n_classes();
    let v = eval_json(&ex, c, &data, n_classes, &cfg.eval, cfg.seed)?;
    if let Some(dir) = &args.render {
        let ids: Vec<&str> = data.iter().map(|s| s.id.as_str()).collect();
        render(&ex, c, &data, n_classes, &ids, dir)?;
    }
    match &args.out {
        Some(path) => write_json(path, &v)?,
        None => println!("{}", serde_json::to_string_pretty(&v)?),
    }
    Ok(v)
}

fn unknown_id(id: &str, data: &[ImageSample]) -> anyhow::Error {
    let ids: Vec<&str> = data.iter().map(|s| s.id.as_str()).collect();
    CoreError::InvalidArgument(format!("unknown image `{id}`; available: {}", ids.join(", "))).into()
}

/// Majority-vote renderings of `ids`; votes are pooled over the whole set.
fn render(ex: &Extractor, c: &Centroids, data: &[ImageSample], n_classes: usize, ids: &[&str], dir: &Path) -> Result<Vec<PathBuf>> {
    let picks = ids
        .iter()
        .map(|id| data.iter().position(|s| s.id == *id).ok_or_else(|| unknown_id(id, data)))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_labels(ex, c, data)?;
    let gts = data
        .iter()
        .map(|s| {
            s.labels
                .clone()
                .ok_or_else(|| CoreError::InvalidArgument(format!("image `{}` has no labels to vote with", s.id)))
        })
        .collect::<picie_core::Result<Vec<_>>>()?;
    let ignore = data.first().map_or(255, |s| s.ignore_value);
    let images = render_majority_vote(&preds, &gts, &default_palette(n_classes), c.k(), ignore)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    picks
        .into_iter()
        .map(|i| {
            let path = dir.join(format!("{}.png", data[i].id));
            images[i].save(&path).with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect()
}

pub fn cmd_visualize(cfg: &RunConfig, checkpoint: &Path, ids: &[String], out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = load_checked(checkpoint, cfg)?;
    let ex = ckpt.extractor()?;
    let data = load_data(&cfg.data)?;
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    render(&ex, ckpt.eval_centroids()?, &data, cfg.data.n_classes(), &ids, out)
}

pub struct NnArgs {
    pub id: String,
    pub coord: (usize, usize),
    pub k: usize,
    pub stride: usize,
    pub crops: Option<PathBuf>,
}

pub fn cmd_nn(cfg: &RunConfig, checkpoint: &Path, args: &NnArgs) -> Result<NeighborList> {
    let ckpt = load_checked(checkpoint, cfg)?;
    let ex = ckpt.extractor()?;
    let data = load_data(&cfg.data)?;
    if !data.iter().any(|s| s.id == args.id) {
        return Err(unknown_id(&args.id, &data));
    }
    let corpus = data
        .iter()
        .map(|s| Ok((s.id.clone(), ex.extract(&s.image)?)))
        .collect::<picie_core::Result<Vec<_>>>()?;
    let list = nearest_neighbors(&args.id, args.coord, &corpus, args.k, args.stride)?;
    if let Some(dir) = &args.crops {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let side = 4 * ex.stride();
        for (rank, n) in list.neighbors.iter().enumerate() {
            let s = data.iter().find(|s| s.id == n.image_id).expect("neighbor from corpus");
            let center = (n.coord.0 * ex.stride() + ex.stride() / 2, n.coord.1 * ex.stride() + ex.stride() / 2);
            let path = dir.join(format!("{:02}_{}_{}_{}.png", rank + 1, n.image_id, n.coord.0, n.coord.1));
            crop(s, center, side).save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(list)
}

/// Square patch around `center`, shifted to stay inside the image.
fn crop(s: &ImageSample, (cy, cx): (usize, usize), side: usize) -> RgbImage {
    let (h, w) = (s.height(), s.width());
    let side = side.min(h).min(w);
    let y0 = cy.saturating_sub(side / 2).min(h - side);
    let x0 = cx.saturating_sub(side / 2).min(w - side);
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let px = |c| (s.image[[c, y0 + y as usize, x0 + x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// One clustering pass; returns per-head cluster statistics.
pub fn cmd_cluster(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Value> {
    let ex = match checkpoint {
        Some(p) => load_checked(p, cfg)?.extractor()?,
        None => Extractor::new(cfg.extractor.clone(), cfg.seed)?,
    };
    let data = load_data(&cfg.data)?;
    let records = if cfg.train.augment {
        sample_records(&data, cfg.seed, 0)
    } else {
        identity_records(&data)
    };
    let opts = ClusterOptions {
        seed: cfg.seed,
        epoch: 0,
        init_batches: cfg.train.kmeans_init_batches,
        batch_size: cfg.train.kmeans_batch_size,
        update_period: cfg.train.kmeans_update_period,
        share_view_rng: false,
    };
    let ks: Vec<usize> = cfg.train.heads()?.into_iter().map(|(k, _)| k).collect();
    let sets = cluster_two_views(&ex, &data, &records, &ks, &opts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut heads = Vec::new();
    for set in &sets {
        set.save(&out.join(format!("k{}.bin", set.k())))?;
        let (v1, v2) = (set.counts(1), set.counts(2));
        heads.push(json!({
            "k": set.k(),
            "images": set.images.len(),
            "empty_view1": v1.iter().filter(|&&n| n == 0).count(),
            "empty_view2": v2.iter().filter(|&&n| n == 0).count(),
            "sizes_view1": v1,
            "sizes_view2": v2,
        }));
    }
    Ok(json!({ "heads": heads }))
}

/// Rejects a configuration whose run directory already holds a different
/// snapshot.
pub fn guard_run_dir(cfg: &RunConfig) -> Result<()> {
    let p = cfg.out_dir.join(SNAPSHOT_FILE);
    if let Ok(existing) = fs::read_to_string(&p) {
        if existing != cfg.snapshot() {
            bail!(ConfigError(format!(
                "{} holds a run with a different configuration; choose another out_dir",
                cfg.out_dir.display()
            )));
        }
    }
    Ok(())
}
