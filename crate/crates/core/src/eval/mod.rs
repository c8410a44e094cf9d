//! Hungarian-matched accuracy and IoU, class partitions, test-time
//! augmentation, majority-vote renderings and pixel retrieval.

mod hungarian;
mod metrics;
mod nn;
mod render;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_match, Matching};
pub use metrics::{metrics, partition_metrics, ConfusionMatrix, MetricsReport, PartitionReport};
pub use nn::{nearest_neighbors, Neighbor, NeighborList, DEFAULT_NN_STRIDE};
pub use render::{default_palette, paint, render_majority_vote, EMPTY_COLOR};

use crate::clustering::{assign_grid, Centroids};
use crate::dataio::ImageSample;
use crate::error::{Error, Result};
use crate::features::Extractor;
use crate::rng::{derive_rng, tag};
use crate::transforms::{
    apply_geometric, apply_geometric_labels, apply_photometric, sample_record, GridKind, PhotometricParams,
    TransformRecord,
};

/// Nearest-neighbor upsampling of a label grid to `(h, w)`.
pub fn upsample_nearest(grid: &Array2<u32>, (h, w): (usize, usize)) -> Array2<u32> {
    let (gh, gw) = grid.dim();
    Array2::from_shape_fn((h, w), |(y, x)| grid[[y * gh / h, x * gw / w]])
}

/// Cluster label per pixel of `image`, at the image's resolution.
pub fn predict_image(extractor: &Extractor, c: &Centroids, image: &ndarray::Array3<f64>) -> Result<Array2<u32>> {
    let (_, h, w) = image.dim();
    let z = extractor.extract(image)?;
    Ok(upsample_nearest(&assign_grid(&z, c)?, (h, w)))
}

pub fn predict_labels(extractor: &Extractor, c: &Centroids, samples: &[ImageSample]) -> Result<Vec<Array2<u32>>> {
    samples
        .par_iter()
        .map(|s| predict_image(extractor, c, &s.image).map_err(|e| e.with_image(&s.id)))
        .collect()
}

/// Confusion matrix of predictions against each sample's labels.
pub fn confusion(preds: &[Array2<u32>], samples: &[ImageSample], k_pred: usize, n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != samples.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            got: preds.len(),
        });
    }
    let parts = preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let gt = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("image `{}` has no labels", s.id)))?;
            let mut cm = ConfusionMatrix::new(k_pred, n_classes);
            cm.accumulate(p, gt, s.ignore_value).map_err(|e| e.with_image(&s.id))?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .iter()
        .fold(ConfusionMatrix::new(k_pred, n_classes), |acc, cm| acc.merge(cm)))
}

/// Matches and scores a set of predictions.
pub fn evaluate_predictions(preds: &[Array2<u32>], samples: &[ImageSample], k_pred: usize, n_classes: usize) -> Result<MetricsReport> {
    let cm = confusion(preds, samples, k_pred, n_classes)?;
    Ok(metrics(&cm, &hungarian_match(&cm)))
}

/// Predicts, matches and scores; `partitions` adds per-subset blocks.
pub fn evaluate(
    extractor: &Extractor,
    c: &Centroids,
    samples: &[ImageSample],
    n_classes: usize,
    partitions: &[(String, Vec<usize>)],
) -> Result<MetricsReport> {
    let preds = predict_labels(extractor, c, samples)?;
    let cm = confusion(&preds, samples, c.k(), n_classes)?;
    let m = hungarian_match(&cm);
    let mut report = metrics(&cm, &m);
    report.partitions = partition_metrics(&cm, &m, partitions)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: MetricsReport,
    pub photometric: MetricsReport,
    pub geometric: MetricsReport,
}

impl RobustnessReport {
    /// Clean accuracy minus photometric accuracy.
    pub fn photometric_drop(&self) -> f64 {
        self.clean.accuracy - self.photometric.accuracy
    }

    pub fn geometric_drop(&self) -> f64 {
        self.clean.accuracy - self.geometric.accuracy
    }
}

/// One test-time transform per image, drawn from the training distribution.
pub fn robustness_records(samples: &[ImageSample], seed: u64) -> Vec<TransformRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, &[tag("robustness"), i as u64]);
            sample_record(&mut rng, s.height().min(s.width()))
        })
        .collect()
}

/// Photometric condition applies `photo1` to the image; geometric condition
/// applies `geo` to both image and labels.
pub fn robustness_eval(
    extractor: &Extractor,
    c: &Centroids,
    samples: &[ImageSample],
    n_classes: usize,
    records: &[TransformRecord],
) -> Result<RobustnessReport> {
    if records.len() != samples.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            got: records.len(),
        });
    }
    let clean = evaluate(extractor, c, samples, n_classes, &[])?;
    let photo: Vec<ImageSample> = samples
        .iter()
        .zip(records)
        .map(|(s, r)| ImageSample {
            image: apply_photometric(&s.image, &r.photo1),
            ..s.clone()
        })
        .collect();
    let geo = samples
        .iter()
        .zip(records)
        .map(|(s, r)| {
            Ok(ImageSample {
                image: apply_geometric(&s.image, &r.geo, GridKind::Image)?,
                labels: s.labels.as_ref().map(|l| apply_geometric_labels(l, &r.geo)).transpose()?,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport {
        clean,
        photometric: evaluate(extractor, c, &photo, n_classes, &[])?,
        geometric: evaluate(extractor, c, &geo, n_classes, &[])?,
    })
}

/// Records whose photometric part is neutral; used for the identity check.
pub fn identity_records(samples: &[ImageSample]) -> Vec<TransformRecord> {
    samples
        .iter()
        .map(|s| TransformRecord {
            photo1: PhotometricParams::identity(),
            ..TransformRecord::identity(s.height().min(s.width()))
        })
        .collect()
}

#[cfg(test)]
mod tests;
