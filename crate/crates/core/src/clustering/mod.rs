//! Mini-batch spherical k-means and the per-epoch two-view clustering pass.

mod centroids;
pub mod kmeans;
mod pseudo;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

pub use centroids::Centroids;
pub use kmeans::{assign_rows, fit, init_centroids, minibatch_update, objective, KMeansConfig, KMeansState};
pub use pseudo::{ImageLabels, PseudoLabelSet};

use crate::dataio::ImageSample;
use crate::error::{Error, Result};
use crate::features::{Extractor, FeatureMap};
use crate::rng::{derive_rng, tag};
use crate::transforms::{apply_geometric, apply_photometric, sample_record, FeatureWarp, GridKind, TransformRecord};

/// Labels every pixel of a feature map with its nearest centroid.
pub fn assign(features: &FeatureMap, c: &Centroids) -> Result<Array2<u32>> {
    assign_grid(&features.values, c)
}

pub fn assign_grid(z: &Array3<f64>, c: &Centroids) -> Result<Array2<u32>> {
    let (d, h, w) = z.dim();
    if d != c.dim() {
        return Err(Error::Dimension { expected: c.dim(), got: d });
    }
    let rows = pixel_rows(z);
    let labels = c.nearest(rows.view())?.0;
    Ok(Array2::from_shape_vec((h, w), labels).expect("h*w labels"))
}

/// (D, H, W) → (H·W, D), raster order.
pub fn pixel_rows(z: &Array3<f64>) -> Array2<f64> {
    let (d, h, w) = z.dim();
    z.view()
        .into_shape_with_order((d, h * w))
        .expect("contiguous")
        .t()
        .as_standard_layout()
        .into_owned()
}

/// Stacks every pixel of every map, image-major.
pub fn pixel_matrix(maps: &[Array3<f64>]) -> Array2<f64> {
    let d = maps.first().map_or(0, |m| m.dim().0);
    let n: usize = maps.iter().map(|m| m.dim().1 * m.dim().2).sum();
    let mut out = Array2::zeros((n, d));
    let mut row = 0;
    for m in maps {
        let r = pixel_rows(m);
        out.slice_mut(ndarray::s![row..row + r.nrows(), ..]).assign(&r);
        row += r.nrows();
    }
    out
}

/// Knobs of one clustering pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterOptions {
    pub seed: u64,
    pub epoch: u32,
    pub init_batches: Option<usize>,
    pub batch_size: Option<usize>,
    pub update_period: Option<usize>,
    /// Both views draw k-means randomness from the same stream.
    pub share_view_rng: bool,
}

impl ClusterOptions {
    pub fn kmeans_config(&self, k: usize, total_pixels: usize) -> KMeansConfig {
        let mut cfg = KMeansConfig::for_dataset(k, total_pixels);
        if let Some(v) = self.init_batches {
            cfg.init_batches = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.update_period {
            cfg.update_period = v;
        }
        cfg
    }
}

/// Fresh transform records for one epoch, one per image.
pub fn sample_records(samples: &[ImageSample], seed: u64, epoch: u32) -> Vec<TransformRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, &[tag("records"), epoch as u64, i as u64]);
            sample_record(&mut rng, s.height().min(s.width()))
        })
        .collect()
}

/// First view: features of the transformed image.
pub fn view1_input(sample: &ImageSample, record: &TransformRecord) -> Result<Array3<f64>> {
    apply_geometric(&apply_photometric(&sample.image, &record.photo1), &record.geo, GridKind::Image)
}

/// Both views of every image in the shared transformed frame.
pub fn view_features(
    extractor: &Extractor,
    samples: &[ImageSample],
    records: &[TransformRecord],
) -> Result<(Vec<Array3<f64>>, Vec<Array3<f64>>)> {
    if samples.len() != records.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            got: records.len(),
        });
    }
    let pairs: Vec<(Array3<f64>, Array3<f64>)> = samples
        .par_iter()
        .zip(records.par_iter())
        .map(|(s, r)| {
            let run = || -> Result<_> {
                let z1 = extractor.extract(&view1_input(s, r)?)?;
                let plain = extractor.extract(&apply_photometric(&s.image, &r.photo2))?;
                let z2 = FeatureWarp::forward(&plain, &r.geo, extractor.stride())?.into_output();
                Ok((z1, z2))
            };
            run().map_err(|e| e.with_image(&s.id))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Fits k-means over all pixels of `maps` and labels every map with the
/// final centroids.
pub fn cluster_features(
    maps: &[Array3<f64>],
    k: usize,
    view: u8,
    opts: &ClusterOptions,
    rng_view: u8,
) -> Result<(Centroids, Vec<Array2<u32>>)> {
    if maps.is_empty() {
        return Err(Error::Clustering("no feature maps to cluster".into()));
    }
    let x = pixel_matrix(maps);
    let cfg = opts.kmeans_config(k, x.nrows());
    let rng = derive_rng(opts.seed, &[tag("kmeans"), opts.epoch as u64, k as u64, rng_view as u64]);
    let state = fit(x.view(), &cfg, view, rng)?;
    let c = state.into_centroids();
    let labels = maps.par_iter().map(|m| assign_grid(m, &c)).collect::<Result<_>>()?;
    Ok((c, labels))
}

/// One pseudo-label set per entry of `ks`, all sharing the same features and
/// transform records.
pub fn cluster_two_views(
    extractor: &Extractor,
    samples: &[ImageSample],
    records: &[TransformRecord],
    ks: &[usize],
    opts: &ClusterOptions,
) -> Result<Vec<PseudoLabelSet>> {
    if samples.is_empty() {
        return Err(Error::Clustering("dataset is empty".into()));
    }
    let (z1, z2) = view_features(extractor, samples, records)?;
    ks.iter()
        .map(|&k| {
            let (c1, l1) = cluster_features(&z1, k, 1, opts, 1)?;
            let (c2, l2) = cluster_features(&z2, k, 2, opts, if opts.share_view_rng { 1 } else { 2 })?;
            let images = samples
                .iter()
                .zip(records)
                .zip(l1.into_iter().zip(l2))
                .map(|((s, r), (view1, view2))| ImageLabels {
                    id: s.id.clone(),
                    view1,
                    view2,
                    record: *r,
                })
                .collect();
            let set = PseudoLabelSet {
                epoch: opts.epoch,
                centroids1: c1,
                centroids2: c2,
                images,
            };
            set.validate()?;
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::features::ExtractorConfig;
    use std::collections::HashSet;

    fn small_data() -> Vec<ImageSample> {
        generate_synthetic(&SyntheticSpec {
            n_images: 6,
            side: 32,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_views_share_labels() {
        let data = small_data();
        let ex = Extractor::new(ExtractorConfig::default(), 3).unwrap();
        let recs = vec![TransformRecord::identity(32); data.len()];
        let opts = ClusterOptions {
            seed: 1,
            share_view_rng: true,
            ..Default::default()
        };
        let sets = cluster_two_views(&ex, &data, &recs, &[3], &opts).unwrap();
        let set = &sets[0];
        assert_eq!(set.centroids1.matrix(), set.centroids2.matrix());
        for im in &set.images {
            assert_eq!(im.view1, im.view2);
            assert_eq!(im.view1.dim(), (8, 8));
        }
        let ids: HashSet<_> = set.images.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), data.len());
    }

    #[test]
    fn random_views_and_heads() {
        let data = small_data();
        let ex = Extractor::new(ExtractorConfig::default(), 3).unwrap();
        let recs = sample_records(&data, 4, 0);
        let sets = cluster_two_views(&ex, &data, &recs, &[3, 5], &ClusterOptions::default()).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[1].k(), 5);
        for set in &sets {
            for (im, r) in set.images.iter().zip(&recs) {
                assert_eq!(&im.record, r);
                assert_eq!(im.view2.dim(), (8, 8));
            }
        }
    }

    #[test]
    fn pseudo_label_round_trip() {
        let data = small_data();
        let ex = Extractor::new(ExtractorConfig::default(), 3).unwrap();
        let recs = sample_records(&data, 4, 2);
        let opts = ClusterOptions {
            epoch: 2,
            ..Default::default()
        };
        let set = cluster_two_views(&ex, &data, &recs, &[4], &opts).unwrap().remove(0);
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        let back = PseudoLabelSet::read(buf.as_slice()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.epoch, 2);
        buf[4] = 9;
        assert!(PseudoLabelSet::read(buf.as_slice()).is_err());
        let total: u64 = set.counts(1).iter().sum();
        assert_eq!(total, 6 * 64);
    }
}
