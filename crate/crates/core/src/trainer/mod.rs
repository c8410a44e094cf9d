//! Alternating cluster / train loop for the two-view method and the
//! single-view DeepCluster-style baseline, plus checkpoints.

mod checkpoint;

use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, NamedCentroids};

use crate::clustering::{cluster_features, cluster_two_views, sample_records, view1_input, ClusterOptions, PseudoLabelSet};
use crate::dataio::ImageSample;
use crate::error::{Error, Result};
use crate::features::Extractor;
use crate::losses::{
    balance, mse_cross_view, parametric_ce_grid, total_loss, within_and_cross, ClusterWeights, LinearHead, ViewTargets,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_rng, tag};
use crate::transforms::{apply_geometric_labels, apply_photometric, FeatureWarp, GeometricParams, TransformRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Picie,
    Mdc,
    NoTrain,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picie" => Ok(Self::Picie),
            "mdc" => Ok(Self::Mdc),
            "no-train" | "notrain" => Ok(Self::NoTrain),
            other => Err(Error::Config(format!("unknown method `{other}` (picie | mdc | no-train)"))),
        }
    }
}

/// Objective pairing each view with the other's clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossLoss {
    Prototype,
    /// Direct feature distance between the views (ablation).
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub k1: usize,
    /// Over-clustering head; 0 disables it.
    pub k2: usize,
    /// `None` picks 10 with pretrained weights, 20 otherwise.
    pub epochs: Option<usize>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// When false every transform record is the identity.
    pub augment: bool,
    pub cross_loss: CrossLoss,
    pub kmeans_init_batches: Option<usize>,
    pub kmeans_batch_size: Option<usize>,
    pub kmeans_update_period: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Picie,
            k1: 27,
            k2: 100,
            epochs: None,
            optimizer: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            augment: true,
            cross_loss: CrossLoss::Prototype,
            kmeans_init_batches: None,
            kmeans_batch_size: None,
            kmeans_update_period: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.k1 < 2 {
            return Err(Error::Config(format!("k1 must be at least 2, got {}", self.k1)));
        }
        if self.k2 == 1 {
            return Err(Error::Config("k2 must be 0 (disabled) or at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }

    pub fn resolved_epochs(&self, pretrained: bool) -> usize {
        self.epochs.unwrap_or(if pretrained { 10 } else { 20 })
    }

    /// Cluster counts with their loss weights.
    pub fn heads(&self) -> Result<Vec<(usize, f64)>> {
        if self.k2 == 0 {
            return Ok(vec![(self.k1, 1.0)]);
        }
        let b = balance(self.k1, self.k2)?;
        Ok(vec![(self.k1, b.k1), (self.k2, b.k2)])
    }

    fn cluster_options(&self, epoch: u32) -> ClusterOptions {
        ClusterOptions {
            seed: self.seed,
            epoch,
            init_batches: self.kmeans_init_batches,
            batch_size: self.kmeans_batch_size,
            update_period: self.kmeans_update_period,
            share_view_rng: false,
        }
    }
}

/// Loss terms of one cluster head, averaged over the epoch's images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub k: usize,
    pub within: f64,
    pub cross: f64,
    pub total: f64,
    pub sizes_view1: Vec<u64>,
    pub sizes_view2: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub method: Method,
    /// Balanced objective that was optimized.
    pub loss: f64,
    pub heads: Vec<HeadReport>,
    pub cluster_secs: f64,
    pub train_secs: f64,
}

/// Final state of a run plus one report per trained epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<EpochReport>,
}

/// Handed to the observer after every epoch.
pub struct EpochEvent<'a> {
    pub report: &'a EpochReport,
    pub checkpoint: &'a Checkpoint,
    pub pseudo_labels: &'a [PseudoLabelSet],
}

/// SHA-256 of the little-endian parameter bytes.
pub fn param_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-image loss terms for each head, in head order.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// Mean of the balanced objective over the batch.
    pub loss: f64,
    /// (within, cross, total) per head, batch means.
    pub heads: Vec<(f64, f64, f64)>,
    pub grad: Vec<f64>,
}

struct ImageTerms {
    loss: f64,
    heads: Vec<(f64, f64, f64)>,
    grad: Vec<f64>,
}

fn sum_terms(terms: Vec<ImageTerms>, n_params: usize, n_heads: usize) -> BatchOutcome {
    let n = terms.len() as f64;
    let mut out = BatchOutcome {
        loss: 0.0,
        heads: vec![(0.0, 0.0, 0.0); n_heads],
        grad: vec![0.0; n_params],
    };
    for t in terms {
        out.loss += t.loss / n;
        for (acc, h) in out.heads.iter_mut().zip(&t.heads) {
            acc.0 += h.0 / n;
            acc.1 += h.1 / n;
            acc.2 += h.2 / n;
        }
        for (g, v) in out.grad.iter_mut().zip(&t.grad) {
            *g += v / n;
        }
    }
    out
}

/// Loss and parameter gradient of the two-view objective on a batch.
/// `batch` holds indices into `samples` and into every set in `sets`.
pub fn picie_batch(
    extractor: &Extractor,
    samples: &[ImageSample],
    batch: &[usize],
    sets: &[PseudoLabelSet],
    lambdas: &[f64],
    cross_loss: CrossLoss,
) -> Result<BatchOutcome> {
    let weights: Vec<(ClusterWeights, ClusterWeights)> = sets.iter().map(|s| (s.weights(1), s.weights(2))).collect();
    let n_params = extractor.params().len();
    let terms = batch
        .par_iter()
        .map(|&i| {
            let sample = &samples[i];
            let run = || -> Result<ImageTerms> {
                let record = sets[0].images[i].record;
                if sets[0].images[i].id != sample.id {
                    return Err(Error::Shape(format!("pseudo-labels out of order at `{}`", sample.id)));
                }
                let pass1 = extractor.forward(&view1_input(sample, &record)?)?;
                let pass2 = extractor.forward(&apply_photometric(&sample.image, &record.photo2))?;
                let warp = FeatureWarp::forward(pass2.features(), &record.geo, extractor.stride())?;
                let (z1, z2) = (pass1.features(), warp.output());
                let mut d1 = Array3::<f64>::zeros(z1.dim());
                let mut d2 = Array3::<f64>::zeros(z2.dim());
                let mut loss = 0.0;
                let mut heads = Vec::with_capacity(sets.len());
                for ((set, (w1, w2)), &lambda) in sets.iter().zip(&weights).zip(lambdas) {
                    let im = &set.images[i];
                    let t1 = ViewTargets { labels: &im.view1, centroids: &set.centroids1, weights: w1 };
                    let t2 = ViewTargets { labels: &im.view2, centroids: &set.centroids2, weights: w2 };
                    let out = within_and_cross(z1, z2, &t1, &t2)?;
                    let (cross, cg) = match cross_loss {
                        CrossLoss::Prototype => (out.cross, out.cross_grad),
                        CrossLoss::Mse => {
                            let (v, g1, g2) = mse_cross_view(z1, z2)?;
                            (v, (g1, g2))
                        }
                    };
                    let total = total_loss(out.within, cross).map_err(|_| Error::NonFinite {
                        context: format!("loss for K={}", set.k()),
                        ids: vec![sample.id.clone()],
                    })?;
                    loss += lambda * total;
                    heads.push((out.within, cross, total));
                    d1.scaled_add(lambda / 2.0, &(&out.within_grad.0 + &cg.0));
                    d2.scaled_add(lambda / 2.0, &(&out.within_grad.1 + &cg.1));
                }
                let mut grad = vec![0.0; n_params];
                extractor.backward(&pass1, &d1, &mut grad);
                extractor.backward(&pass2, &warp.backward(&d2), &mut grad);
                Ok(ImageTerms { loss, heads, grad })
            };
            run().map_err(|e| e.with_image(&sample.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = sum_terms(terms, n_params, sets.len());
    check_batch(&out, samples, batch)?;
    Ok(out)
}

fn check_batch(out: &BatchOutcome, samples: &[ImageSample], batch: &[usize]) -> Result<()> {
    if out.loss.is_finite() && out.grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "training loss".into(),
            ids: batch.iter().map(|&i| samples[i].id.clone()).collect(),
        })
    }
}

/// Single-view parametric batch: loss, extractor gradient, head gradient.
pub fn mdc_batch(
    extractor: &Extractor,
    head: &LinearHead,
    samples: &[ImageSample],
    records: &[TransformRecord],
    labels: &[Array2<u32>],
    weights: &ClusterWeights,
    batch: &[usize],
) -> Result<(BatchOutcome, Array2<f64>, Array1<f64>)> {
    let n_params = extractor.params().len();
    let terms = batch
        .par_iter()
        .map(|&i| {
            let run = || -> Result<(ImageTerms, Array2<f64>, Array1<f64>)> {
                let pass = extractor.forward(&view1_input(&samples[i], &records[i])?)?;
                let (loss, hg) = parametric_ce_grid(pass.features(), &labels[i], head, weights)?;
                let mut grad = vec![0.0; n_params];
                extractor.backward(&pass, &hg.d_z, &mut grad);
                Ok((
                    ImageTerms {
                        loss,
                        heads: vec![(loss, 0.0, loss)],
                        grad,
                    },
                    hg.d_weight,
                    hg.d_bias,
                ))
            };
            run().map_err(|e| e.with_image(&samples[i].id))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    let mut dw = Array2::zeros(head.weight.dim());
    let mut db = Array1::zeros(head.k());
    let mut image_terms = Vec::with_capacity(terms.len());
    for (t, w, b) in terms {
        dw.scaled_add(1.0 / n, &w);
        db.scaled_add(1.0 / n, &b);
        image_terms.push(t);
    }
    let out = sum_terms(image_terms, n_params, 1);
    check_batch(&out, samples, batch)?;
    Ok((out, dw, db))
}

fn epoch_records(samples: &[ImageSample], config: &TrainConfig, epoch: u32) -> Vec<TransformRecord> {
    if config.augment {
        sample_records(samples, config.seed, epoch)
    } else {
        samples
            .iter()
            .map(|s| TransformRecord::identity(s.height().min(s.width())))
            .collect()
    }
}

fn batches(n: usize, size: usize, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[tag("order"), epoch as u64]));
    order.chunks(size).map(|c| c.to_vec()).collect()
}

/// Clusters clean (untransformed) features with K1; these centroids label
/// pixels at prediction time.
pub fn eval_centroids(extractor: &Extractor, samples: &[ImageSample], config: &TrainConfig) -> Result<crate::clustering::Centroids> {
    let maps = samples
        .par_iter()
        .map(|s| extractor.extract(&s.image).map_err(|e| e.with_image(&s.id)))
        .collect::<Result<Vec<_>>>()?;
    let opts = config.cluster_options(u32::MAX);
    Ok(cluster_features(&maps, config.k1, 0, &opts, 0)?.0)
}

/// Runs the configured method. `resume` continues from a checkpoint of the
/// same configuration; `observer` sees every finished epoch.
pub fn train(
    samples: &[ImageSample],
    extractor: Extractor,
    config: &TrainConfig,
    config_hash: &str,
    resume: Option<Checkpoint>,
    observer: &mut dyn FnMut(EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    match config.method {
        Method::Picie => run_loop(samples, extractor, config, config_hash, resume, observer, picie_epoch),
        Method::Mdc => run_loop(samples, extractor, config, config_hash, resume, observer, mdc_epoch),
        Method::NoTrain => no_train(samples, extractor, config, config_hash),
    }
}

/// Clusters the freshly initialized extractor's features; nothing is trained.
pub fn no_train(samples: &[ImageSample], extractor: Extractor, config: &TrainConfig, config_hash: &str) -> Result<TrainOutcome> {
    let eval = eval_centroids(&extractor, samples, config)?;
    let n = extractor.params().len();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            train: config.clone(),
            extractor: extractor.config().clone(),
            config_hash: config_hash.to_owned(),
            epoch: 0,
            params: extractor.params().to_vec(),
            optimizer: Adam::new(config.optimizer, n),
            centroids: vec![NamedCentroids { name: "eval".into(), centroids: eval }],
        },
        reports: vec![],
    })
}

type EpochFn = fn(&[ImageSample], &mut Extractor, &mut Adam, &TrainConfig, u32) -> Result<(EpochReport, Vec<PseudoLabelSet>)>;

fn run_loop(
    samples: &[ImageSample],
    mut extractor: Extractor,
    config: &TrainConfig,
    config_hash: &str,
    resume: Option<Checkpoint>,
    observer: &mut dyn FnMut(EpochEvent) -> Result<()>,
    epoch_fn: EpochFn,
) -> Result<TrainOutcome> {
    let epochs = config.resolved_epochs(extractor.config().pretrained.is_some()) as u32;
    let mut adam = Adam::new(config.optimizer, extractor.params().len());
    let mut start = 0;
    if let Some(ck) = resume {
        if ck.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "cannot resume: checkpoint hash {} differs from {config_hash}",
                ck.config_hash
            )));
        }
        extractor.set_params(&ck.params)?;
        adam = ck.optimizer;
        start = ck.epoch;
    }
    let mut reports = Vec::new();
    let mut last: Option<Checkpoint> = None;
    for epoch in start..epochs {
        let (report, sets) = epoch_fn(samples, &mut extractor, &mut adam, config, epoch)?;
        log::info!("epoch {} loss {:.5}", report.epoch, report.loss);
        let mut centroids: Vec<NamedCentroids> = sets
            .iter()
            .flat_map(|s| {
                [
                    NamedCentroids { name: format!("k{}.view1", s.k()), centroids: s.centroids1.clone() },
                    NamedCentroids { name: format!("k{}.view2", s.k()), centroids: s.centroids2.clone() },
                ]
            })
            .collect();
        if epoch + 1 == epochs {
            let eval = eval_centroids(&extractor, samples, config)?;
            centroids.push(NamedCentroids { name: "eval".into(), centroids: eval });
        }
        let ck = Checkpoint {
            train: config.clone(),
            extractor: extractor.config().clone(),
            config_hash: config_hash.to_owned(),
            epoch: epoch + 1,
            params: extractor.params().to_vec(),
            optimizer: adam.clone(),
            centroids,
        };
        observer(EpochEvent {
            report: &report,
            checkpoint: &ck,
            pseudo_labels: &sets,
        })?;
        reports.push(report);
        last = Some(ck);
    }
    let checkpoint = match last {
        Some(ck) => ck,
        None => {
            let eval = eval_centroids(&extractor, samples, config)?;
            Checkpoint {
                train: config.clone(),
                extractor: extractor.config().clone(),
                config_hash: config_hash.to_owned(),
                epoch: start,
                params: extractor.params().to_vec(),
                optimizer: adam,
                centroids: vec![NamedCentroids { name: "eval".into(), centroids: eval }],
            }
        }
    };
    Ok(TrainOutcome { checkpoint, reports })
}

fn picie_epoch(
    samples: &[ImageSample],
    extractor: &mut Extractor,
    adam: &mut Adam,
    config: &TrainConfig,
    epoch: u32,
) -> Result<(EpochReport, Vec<PseudoLabelSet>)> {
    let heads = config.heads()?;
    let ks: Vec<usize> = heads.iter().map(|h| h.0).collect();
    let lambdas: Vec<f64> = heads.iter().map(|h| h.1).collect();
    let t0 = Instant::now();
    let records = epoch_records(samples, config, epoch);
    let sets = cluster_two_views(extractor, samples, &records, &ks, &config.cluster_options(epoch))?;
    let cluster_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut sums = vec![(0.0, 0.0, 0.0); ks.len()];
    let mut loss = 0.0;
    for batch in batches(samples.len(), config.batch_size, config.seed, epoch) {
        let out = picie_batch(extractor, samples, &batch, &sets, &lambdas, config.cross_loss)?;
        let share = batch.len() as f64 / samples.len() as f64;
        loss += out.loss * share;
        for (s, h) in sums.iter_mut().zip(&out.heads) {
            s.0 += h.0 * share;
            s.1 += h.1 * share;
            s.2 += h.2 * share;
        }
        adam.update(extractor.params_mut(), &out.grad);
    }
    let report = EpochReport {
        epoch: epoch + 1,
        method: Method::Picie,
        loss,
        heads: sets
            .iter()
            .zip(&sums)
            .map(|(s, &(within, cross, total))| HeadReport {
                k: s.k(),
                within,
                cross,
                total,
                sizes_view1: s.counts(1),
                sizes_view2: s.counts(2),
            })
            .collect(),
        cluster_secs,
        train_secs: t1.elapsed().as_secs_f64(),
    };
    Ok((report, sets))
}

/// Classifier head drawn from N(0, 0.01²) with zero bias.
pub fn init_head(k: usize, dim: usize, seed: u64, epoch: u32) -> LinearHead {
    let mut rng = derive_rng(seed, &[tag("head"), epoch as u64]);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut head = LinearHead::zeros(k, dim);
    head.weight.mapv_inplace(|_| normal.sample(&mut rng));
    head
}

fn mdc_epoch(
    samples: &[ImageSample],
    extractor: &mut Extractor,
    adam: &mut Adam,
    config: &TrainConfig,
    epoch: u32,
) -> Result<(EpochReport, Vec<PseudoLabelSet>)> {
    let t0 = Instant::now();
    let records = epoch_records(samples, config, epoch);
    // Pseudo-labels come from the untransformed images; the augmented view
    // is trained against them after the geometric part is applied.
    let maps = samples
        .par_iter()
        .map(|s| extractor.extract(&s.image).map_err(|e| e.with_image(&s.id)))
        .collect::<Result<Vec<_>>>()?;
    let (centroids, clean) = cluster_features(&maps, config.k1, 1, &config.cluster_options(epoch), 1)?;
    drop(maps);
    let stride = extractor.stride();
    let labels = clean
        .iter()
        .zip(&records)
        .map(|(l, r)| {
            let g = GeometricParams {
                out_side: r.geo.out_side / stride,
                ..r.geo
            };
            apply_geometric_labels(l, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PseudoLabelSet {
        epoch,
        centroids1: centroids.clone(),
        centroids2: centroids.with_view(2),
        images: samples
            .iter()
            .zip(&records)
            .zip(&labels)
            .map(|((s, r), l)| crate::clustering::ImageLabels {
                id: s.id.clone(),
                view1: l.clone(),
                view2: l.clone(),
                record: *r,
            })
            .collect(),
    };
    let weights = set.weights(1);
    let cluster_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut head = init_head(config.k1, extractor.feature_dim(), config.seed, epoch);
    let head_len = head.weight.len() + head.bias.len();
    let mut head_opt = Adam::new(config.optimizer, head_len);
    let mut loss = 0.0;
    for batch in batches(samples.len(), config.batch_size, config.seed, epoch) {
        let (out, dw, db) = mdc_batch(extractor, &head, samples, &records, &labels, &weights, &batch)?;
        loss += out.loss * batch.len() as f64 / samples.len() as f64;
        adam.update(extractor.params_mut(), &out.grad);
        let mut hp: Vec<f64> = head.weight.iter().chain(head.bias.iter()).copied().collect();
        let hg: Vec<f64> = dw.iter().chain(db.iter()).copied().collect();
        head_opt.update(&mut hp, &hg);
        let nw = head.weight.len();
        head.weight = Array2::from_shape_vec(head.weight.dim(), hp[..nw].to_vec()).expect("head shape");
        head.bias = Array1::from(hp[nw..].to_vec());
    }
    let counts = set.counts(1);
    let report = EpochReport {
        epoch: epoch + 1,
        method: Method::Mdc,
        loss,
        heads: vec![HeadReport {
            k: config.k1,
            within: loss,
            cross: 0.0,
            total: loss,
            sizes_view1: counts.clone(),
            sizes_view2: counts,
        }],
        cluster_secs,
        train_secs: t1.elapsed().as_secs_f64(),
    };
    Ok((report, vec![set]))
}
