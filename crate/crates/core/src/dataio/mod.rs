//! Dataset ingestion: image folders with optional label maps, preprocessing to
//! square inputs, label remapping, and a procedural dataset for desk-scale runs.

mod folder;
mod synthetic;

pub use folder::{load_and_preprocess, parse_label_remap, preprocess, DatasetManifest};
pub use synthetic::{generate_synthetic, ClassStyle, SyntheticSpec, STYLE_VOCABULARY};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE: u32 = 255;

/// One preprocessed image. `image` is channel-first (3, H, W) with values in
/// [0, 1]; `labels` is (H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Array3<f64>,
    pub labels: Option<Array2<u32>>,
    pub ignore_value: u32,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        image: Array3<f64>,
        labels: Option<Array2<u32>>,
        ignore_value: u32,
    ) -> Result<Self> {
        let id = id.into();
        if image.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image `{id}` has {} channels, expected 3",
                image.shape()[0]
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Decode {
                id,
                message: "pixel values outside [0, 1]".into(),
            });
        }
        if let Some(l) = &labels {
            if l.dim() != (image.shape()[1], image.shape()[2]) {
                return Err(Error::Shape(format!(
                    "image `{id}` is {}x{} but its label map is {}x{}",
                    image.shape()[1],
                    image.shape()[2],
                    l.nrows(),
                    l.ncols()
                )));
            }
        }
        Ok(Self {
            id,
            image,
            labels,
            ignore_value,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Per-class pixel counts over a dataset, ignore pixels excluded.
pub fn class_pixel_counts(samples: &[ImageSample], n_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_classes];
    for s in samples {
        if let Some(l) = &s.labels {
            for &v in l.iter() {
                if v != s.ignore_value && (v as usize) < n_classes {
                    counts[v as usize] += 1;
                }
            }
        }
    }
    counts
}
