use ndarray::{Array1, Array2, Array3, Axis};

use super::record::GeometricParams;
use crate::error::{Error, Result};
use crate::ops::{l2_normalize, l2_normalize_backward, ResamplePlan};

/// What a channel-first grid holds; decides the output size and the
/// post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Output side is `out_side`.
    Image,
    /// A feature map at `1/stride` of the image resolution; output side is
    /// `out_side / stride` and every pixel is re-normalized to unit length.
    Features { stride: usize },
}

/// Builds the sampling plan of `g` for a grid of the given size.
pub fn warp_plan(g: &GeometricParams, (h, w): (usize, usize), out_side: usize, nearest: bool) -> Result<ResamplePlan> {
    let side = g.crop_factor * h.min(w) as f64;
    if side < 1.0 || out_side == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate crop: side {side:.3} cells on a {h}x{w} grid, output {out_side}"
        )));
    }
    let x0 = g.crop_center.0 * w as f64 - side / 2.0;
    let y0 = g.crop_center.1 * h as f64 - side / 2.0;
    let step = side / out_side as f64;
    let flip = g.flip;
    let map = move |oy: usize, ox: usize| {
        let ox = if flip { out_side - 1 - ox } else { ox };
        (y0 + (oy as f64 + 0.5) * step - 0.5, x0 + (ox as f64 + 0.5) * step - 0.5)
    };
    let dims = (out_side, out_side);
    Ok(if nearest {
        ResamplePlan::nearest((h, w), dims, map)
    } else {
        ResamplePlan::bilinear((h, w), dims, map)
    })
}

fn output_side(g: &GeometricParams, kind: GridKind) -> Result<usize> {
    match kind {
        GridKind::Image => Ok(g.out_side),
        GridKind::Features { stride } => {
            if stride == 0 || g.out_side % stride != 0 {
                Err(Error::InvalidArgument(format!(
                    "output side {} is not divisible by feature stride {stride}",
                    g.out_side
                )))
            } else {
                Ok(g.out_side / stride)
            }
        }
    }
}

/// Crops, resizes (bilinear) and optionally flips a (C, H, W) grid.
pub fn apply_geometric(grid: &Array3<f64>, g: &GeometricParams, kind: GridKind) -> Result<Array3<f64>> {
    let (_, h, w) = grid.dim();
    let plan = warp_plan(g, (h, w), output_side(g, kind)?, false)?;
    if plan.is_identity() {
        return Ok(grid.clone());
    }
    let out = plan.forward(grid.view());
    Ok(match kind {
        GridKind::Image => out,
        GridKind::Features { .. } => l2_normalize(&out).0,
    })
}

/// Same transform for a label map, with nearest-neighbor sampling.
pub fn apply_geometric_labels(labels: &Array2<u32>, g: &GeometricParams) -> Result<Array2<u32>> {
    let (h, w) = labels.dim();
    let plan = warp_plan(g, (h, w), g.out_side, true)?;
    let src: Vec<u32> = labels.iter().copied().collect();
    let idx: Vec<usize> = plan.dominant_sources().collect();
    Ok(Array2::from_shape_fn((g.out_side, g.out_side), |(y, x)| src[idx[y * g.out_side + x]]))
}

/// Feature-space geometric transform with the state needed to backpropagate
/// through it.
#[derive(Debug, Clone)]
pub struct FeatureWarp {
    plan: ResamplePlan,
    /// The plan copies its input; forward and backward pass values through.
    identity: bool,
    output: Array3<f64>,
    norms: Array1<f64>,
}

impl FeatureWarp {
    pub fn forward(features: &Array3<f64>, g: &GeometricParams, stride: usize) -> Result<Self> {
        let (_, h, w) = features.dim();
        let out_side = output_side(g, GridKind::Features { stride })?;
        let plan = warp_plan(g, (h, w), out_side, false)?;
        if plan.is_identity() {
            let norms = Array1::ones(h * w);
            return Ok(Self { plan, identity: true, output: features.clone(), norms });
        }
        let (output, norms) = l2_normalize(&plan.forward(features.view()));
        Ok(Self { plan, identity: false, output, norms })
    }

    pub fn output(&self) -> &Array3<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array3<f64> {
        self.output
    }

    /// Maps dL/d(output) back to dL/d(input features).
    pub fn backward(&self, grad: &Array3<f64>) -> Array3<f64> {
        if self.identity {
            return grad.clone();
        }
        let pre = l2_normalize_backward(&self.output, &self.norms, grad);
        self.plan.backward(pre.view())
    }
}

/// Horizontal mirror of any channel-first grid.
pub fn flip_horizontal(grid: &Array3<f64>) -> Array3<f64> {
    let mut out = grid.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}
