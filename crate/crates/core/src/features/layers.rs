//! Convolution, per-channel affine, ReLU and max-pool with explicit backward
//! passes. Parameters live in a flat slice; layers only remember offsets.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::params::ParamLayout;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    w_off: usize,
    b_off: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Array2<f64>,
    in_hw: (usize, usize),
}

pub enum Init {
    /// N(0, 2 / fan_in).
    KaimingNormal,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    Uniform,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w_off = layout.push(format!("{name}.weight"), &[out_c, in_c, kernel, kernel]);
        let b_off = bias.then(|| layout.push(format!("{name}.bias"), &[out_c]));
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            w_off,
            b_off,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn init(&self, params: &mut [f64], init: Init, rng: &mut Rng) {
        let n = self.out_c * self.fan_in();
        let w = &mut params[self.w_off..self.w_off + n];
        match init {
            Init::KaimingNormal => {
                let d = Normal::new(0.0, (2.0 / self.fan_in() as f64).sqrt()).expect("valid std");
                w.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            Init::Uniform => {
                let b = 1.0 / (self.fan_in() as f64).sqrt();
                w.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
                if let Some(off) = self.b_off {
                    params[off..off + self.out_c]
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-b..b));
                }
            }
        }
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.out_c * self.fan_in();
        ArrayView2::from_shape((self.out_c, self.fan_in()), &params[self.w_off..self.w_off + n]).expect("layout")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw((h, w));
        let k = self.kernel;
        let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("standard layout");
        let cs = col.as_slice_mut().expect("fresh array");
        let n = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f64>, (h, w): (usize, usize)) -> Array3<f64> {
        let (oh, ow) = self.output_hw((h, w));
        let k = self.kernel;
        let c = self.in_c;
        let n = oh * ow;
        let mut x = Array3::<f64>::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = col.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.output_hw((h, w));
        let col = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.view().into_shape_with_order((c, h * w)).expect("contiguous").to_owned()
        } else {
            self.im2col(x)
        };
        let mut y = self.weight(params).dot(&col);
        if let Some(off) = self.b_off {
            for (mut row, &b) in y.rows_mut().into_iter().zip(&params[off..off + self.out_c]) {
                row += b;
            }
        }
        let y = y.into_shape_with_order((self.out_c, oh, ow)).expect("contiguous");
        (y, ConvCache { col, in_hw: (h, w) })
    }

    /// Accumulates parameter gradients into `grad`; returns dL/dx when asked.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (o, oh, ow) = dy.dim();
        let dy2 = dy.view().into_shape_with_order((o, oh * ow)).expect("contiguous");
        let n = self.out_c * self.fan_in();
        {
            let mut gw = ArrayViewMut2::from_shape((self.out_c, self.fan_in()), &mut grad[self.w_off..self.w_off + n])
                .expect("layout");
            general_mat_mul(1.0, &dy2, &cache.col.t(), 1.0, &mut gw);
        }
        if let Some(off) = self.b_off {
            for (g, row) in grad[off..off + self.out_c].iter_mut().zip(dy2.rows()) {
                *g += row.sum();
            }
        }
        if !need_input_grad {
            return None;
        }
        let dcol = self.weight(params).t().dot(&dy2);
        let (h, w) = cache.in_hw;
        Some(if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            dcol.into_shape_with_order((self.in_c, h, w)).expect("contiguous")
        } else {
            self.col2im(&dcol, (h, w))
        })
    }
}

/// Per-channel scale and shift (a batch-norm layer with frozen statistics
/// folded in).
#[derive(Debug, Clone)]
pub struct Affine {
    pub channels: usize,
    scale_off: usize,
    shift_off: usize,
}

impl Affine {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let scale_off = layout.push(format!("{name}.weight"), &[channels]);
        let shift_off = layout.push(format!("{name}.bias"), &[channels]);
        Self {
            channels,
            scale_off,
            shift_off,
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        params[self.scale_off..self.scale_off + self.channels].fill(1.0);
        params[self.shift_off..self.shift_off + self.channels].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (s, t) = (params[self.scale_off + c], params[self.shift_off + c]);
            plane.mapv_inplace(|v| v * s + t);
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &Array3<f64>, dy: &Array3<f64>, grad: &mut [f64]) -> Array3<f64> {
        let mut dx = dy.clone();
        for (c, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
            let xc = x.index_axis(Axis(0), c);
            grad[self.scale_off + c] += (&plane * &xc).sum();
            grad[self.shift_off + c] += plane.sum();
            let s = params[self.scale_off + c];
            plane.mapv_inplace(|v| v * s);
        }
        dx
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of ReLU given its output.
pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// 3x3, stride 2, padding 1 max-pool. Returns the output and argmax indices
/// into the flattened input plane.
pub fn max_pool(x: &Array3<f64>) -> (Array3<f64>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0u32);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            let v = x[[ci, iy as usize, ix as usize]];
                            if v > best.0 {
                                best = (v, (iy as usize * w + ix as usize) as u32);
                            }
                        }
                    }
                }
                y[[ci, oy, ox]] = best.0;
                arg.push(best.1);
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(arg: &[u32], in_dim: (usize, usize, usize), dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let mut dx = Array3::<f64>::zeros(in_dim);
    let per = dy.len() / c;
    for ci in 0..c {
        let plane = dx.index_axis_mut(Axis(0), ci).into_slice().expect("fresh array");
        debug_assert_eq!(plane.len(), h * w);
        let g = dy.index_axis(Axis(0), ci);
        for (k, gv) in g.iter().enumerate() {
            plane[arg[ci * per + k] as usize] += gv;
        }
    }
    dx
}
