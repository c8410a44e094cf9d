//! Photometric and geometric augmentations with serializable, replayable
//! parameter records.

pub mod color;
mod geometric;
mod photometric;
mod record;

pub use geometric::{apply_geometric, apply_geometric_labels, flip_horizontal, warp_plan, FeatureWarp, GridKind};
pub use photometric::{apply_photometric, gaussian_blur, gaussian_kernel};
pub use record::{sample_record, GeometricParams, PhotometricParams, TransformRecord};
pub use record::{BLUR_PROB, CROP_FACTOR, FLIP_PROB, GRAYSCALE_PROB, JITTER_PROB};
