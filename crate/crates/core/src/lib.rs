//! Unsupervised semantic segmentation by pixel-level clustering with
//! photometric invariance and geometric equivariance.
//!
//! The crate alternates two phases per epoch: a two-view mini-batch spherical
//! k-means pass that produces pseudo-labels and prototypes, and a training pass
//! that pulls pixel embeddings towards the prototypes of both views. The
//! evaluation stack scores cluster maps against ground truth with Hungarian
//! matching.

pub mod clustering;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod transforms;

pub use clustering::{Centroids, PseudoLabelSet};
pub use dataio::{ImageSample, SyntheticSpec};
pub use error::{Error, ErrorKind, Result};
pub use eval::{ConfusionMatrix, Matching, MetricsReport};
pub use features::{Extractor, ExtractorConfig, FeatureMap};
pub use trainer::{Checkpoint, EpochReport, Method, TrainConfig};
pub use transforms::TransformRecord;
