//! Pixel-level feature extractor: a multi-scale backbone, one 1x1 projection
//! per pyramid level to a shared width, bilinear upsampling of every level to
//! the output stride, element-wise summation and per-pixel L2 normalization.

mod backbone;
mod layers;
pub mod params;

use std::path::PathBuf;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

pub use backbone::{RESNET_CHANNELS, TINY_CHANNELS};
pub use layers::{Affine, Conv, Init};
pub use params::{ParamEntry, ParamLayout};

use backbone::{Backbone, BackboneCache};
use layers::ConvCache;

use crate::error::{Error, Result};
use crate::ops::{l2_normalize, l2_normalize_backward, ResamplePlan};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Four stride-2 conv+ReLU stages (16/32/64/64 channels).
    Tiny,
    /// ResNet-18 layout; meant to be initialized from converted weights.
    Resnet18,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "resnet18" => Ok(Self::Resnet18),
            other => Err(Error::Config(format!("unknown backbone `{other}` (tiny | resnet18)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub stride: usize,
    pub pretrained: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            feature_dim: 128,
            stride: 4,
            pretrained: None,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(Error::Config(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        Ok(())
    }
}

/// Unit-norm per-pixel embeddings of one view of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// (D, H / stride, W / stride).
    pub values: Array3<f64>,
    pub image_id: String,
    pub view: u8,
}

/// Everything `Extractor::backward` needs from a forward pass.
pub struct ForwardPass {
    backbone: BackboneCache,
    projections: Vec<(ConvCache, Option<ResamplePlan>)>,
    features: Array3<f64>,
    norms: Array1<f64>,
}

impl ForwardPass {
    pub fn features(&self) -> &Array3<f64> {
        &self.features
    }
}

#[derive(Debug, Clone)]
pub struct Extractor {
    config: ExtractorConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    backbone: Backbone,
    /// (stage index, projection) for every pyramid level.
    laterals: Vec<(usize, Conv)>,
}

impl Extractor {
    /// Builds the network and draws its initial parameters from `seed`; loads
    /// `config.pretrained` on top when set.
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let backbone = match config.backbone {
            BackboneKind::Tiny => Backbone::tiny(&mut layout),
            BackboneKind::Resnet18 => Backbone::resnet18(&mut layout),
        };
        let laterals: Vec<(usize, Conv)> = backbone
            .stages()
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| *s >= config.stride)
            .enumerate()
            .map(|(lvl, (i, &(c, _)))| {
                let conv = Conv::new(&mut layout, &format!("fpn.lateral{lvl}"), c, config.feature_dim, 1, 1, 0, true);
                (i, conv)
            })
            .collect();
        if laterals.len() < 2 {
            return Err(Error::Config(format!(
                "stride {} leaves fewer than two pyramid levels",
                config.stride
            )));
        }
        let mut params = vec![0.0; layout.total()];
        let mut rng = derive_rng(seed, &[crate::rng::tag("extractor")]);
        backbone.init(&mut params, &mut rng);
        for (_, conv) in &laterals {
            conv.init(&mut params, Init::Uniform, &mut rng);
        }
        let mut ex = Self {
            config,
            layout,
            params,
            backbone,
            laterals,
        };
        if let Some(path) = ex.config.pretrained.clone() {
            let named = params::load_weights(&path)?;
            let n = params::assign_named(&ex.layout, &mut ex.params, &named)?;
            if n == 0 {
                return Err(Error::Config(format!("{} matched no parameter names", path.display())));
            }
            log::info!("loaded {n} tensors from {}", path.display());
        }
        Ok(ex)
    }

    /// Rebuilds an extractor from saved parameters; `config.pretrained` is
    /// recorded but not read.
    pub fn from_params(config: ExtractorConfig, values: &[f64]) -> Result<Self> {
        let pretrained = config.pretrained.clone();
        let mut ex = Self::new(ExtractorConfig { pretrained: None, ..config }, 0)?;
        ex.set_params(values)?;
        ex.config.pretrained = pretrained;
        Ok(ex)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn stride(&self) -> usize {
        self.config.stride
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<(usize, usize)> {
        let (c, h, w) = image.dim();
        let s = self.config.stride;
        if c != 3 {
            return Err(Error::Shape(format!("extractor expects 3 channels, got {c}")));
        }
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by stride {s}")));
        }
        Ok((h / s, w / s))
    }

    /// Feature map (D, H / stride, W / stride) with unit-norm pixels.
    pub fn extract(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(image)?.features)
    }

    pub fn extract_map(&self, image: &Array3<f64>, image_id: &str, view: u8) -> Result<FeatureMap> {
        Ok(FeatureMap {
            values: self.extract(image)?,
            image_id: image_id.to_owned(),
            view,
        })
    }

    /// Pre-normalization fused map; exposed for scale-invariance checks.
    pub fn fused(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let out_hw = self.check_input(image)?;
        let (levels, _) = self.backbone.forward(&self.params, &standardize(image));
        Ok(self.fuse(&levels, out_hw).0)
    }

    fn fuse(&self, levels: &[Array3<f64>], out_hw: (usize, usize)) -> (Array3<f64>, Vec<(ConvCache, Option<ResamplePlan>)>) {
        let mut fused = Array3::<f64>::zeros((self.config.feature_dim, out_hw.0, out_hw.1));
        let mut caches = Vec::with_capacity(self.laterals.len());
        for (stage, conv) in &self.laterals {
            let (proj, cache) = conv.forward(&self.params, &levels[*stage]);
            let (_, h, w) = proj.dim();
            if (h, w) == out_hw {
                fused += &proj;
                caches.push((cache, None));
            } else {
                let plan = ResamplePlan::resize((h, w), out_hw);
                fused += &plan.forward(proj.view());
                caches.push((cache, Some(plan)));
            }
        }
        (fused, caches)
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<ForwardPass> {
        let out_hw = self.check_input(image)?;
        let (levels, backbone) = self.backbone.forward(&self.params, &standardize(image));
        let (fused, projections) = self.fuse(&levels, out_hw);
        let (features, norms) = l2_normalize(&fused);
        Ok(ForwardPass {
            backbone,
            projections,
            features,
            norms,
        })
    }

    /// Accumulates dL/dθ into `grad` given dL/d(features).
    pub fn backward(&self, pass: &ForwardPass, d_features: &Array3<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let d_fused = l2_normalize_backward(&pass.features, &pass.norms, d_features);
        let mut d_stages: Vec<Option<Array3<f64>>> = vec![None; self.backbone.stages().len()];
        for ((stage, conv), (cache, plan)) in self.laterals.iter().zip(&pass.projections) {
            let d_proj = match plan {
                Some(plan) => plan.backward(d_fused.view()),
                None => d_fused.clone(),
            };
            let d_level = conv
                .backward(&self.params, cache, &d_proj, grad, true)
                .expect("input grad");
            d_stages[*stage] = Some(match d_stages[*stage].take() {
                Some(prev) => prev + d_level,
                None => d_level,
            });
        }
        self.backbone.backward(&self.params, &pass.backbone, d_stages, grad);
    }
}

/// Per-channel input statistics (ImageNet convention) removed before the backbone.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn standardize(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - INPUT_MEAN[c]) / INPUT_STD[c]);
    }
    out
}

/// Runs the extractor on a batch, lets `loss` turn the feature maps into a
/// scalar plus dL/d(features), and backpropagates. Returns the loss and
/// dL/dθ.
pub fn gradient_of_loss<F>(extractor: &Extractor, batch: &[(&str, &Array3<f64>)], mut loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[Array3<f64>]) -> Result<(f64, Vec<Array3<f64>>)>,
{
    let passes = batch
        .iter()
        .map(|(_, img)| extractor.forward(img))
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<Array3<f64>> = passes.iter().map(|p| p.features.clone()).collect();
    let (value, grads) = loss(&feats)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
            ids: batch.iter().map(|(id, _)| id.to_string()).collect(),
        });
    }
    if grads.len() != passes.len() {
        return Err(Error::Dimension {
            expected: passes.len(),
            got: grads.len(),
        });
    }
    let mut grad = vec![0.0; extractor.params.len()];
    for (pass, g) in passes.iter().zip(&grads) {
        extractor.backward(pass, g, &mut grad);
    }
    Ok((value, grad))
}
