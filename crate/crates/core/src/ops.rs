//! Small differentiable primitives shared by the extractor and the feature
//! warp: per-pixel L2 normalization and separable resampling plans.

use ndarray::{Array1, Array3, ArrayView3, Axis};

/// Lower bound on a pixel norm so zero vectors do not divide by zero.
pub const NORM_EPS: f64 = 1e-12;

/// Normalizes every pixel vector of a (C, H, W) map. Returns the normalized map
/// and the per-pixel norms (flattened H*W) for the backward pass.
pub fn l2_normalize(x: &Array3<f64>) -> (Array3<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let flat = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let norms = flat.map_axis(Axis(0), |col| col.dot(&col).sqrt().max(NORM_EPS));
    let mut out = x.clone();
    {
        let mut of = out.view_mut().into_shape_with_order((c, h * w)).expect("contiguous");
        for mut row in of.rows_mut() {
            row.zip_mut_with(&norms, |v, n| *v /= n);
        }
    }
    (out, norms)
}

/// Gradient of `l2_normalize` given its output `z`, the norms and dL/dz.
pub fn l2_normalize_backward(z: &Array3<f64>, norms: &Array1<f64>, dz: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = z.dim();
    let zf = z.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let dzf = dz.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let dots = (&zf * &dzf).sum_axis(Axis(0));
    let mut out = Array3::<f64>::zeros((c, h, w));
    {
        let mut of = out.view_mut().into_shape_with_order((c, h * w)).expect("contiguous");
        for ((mut o, zr), dr) in of.rows_mut().into_iter().zip(zf.rows()).zip(dzf.rows()) {
            for p in 0..h * w {
                o[p] = (dr[p] - zr[p] * dots[p]) / norms[p];
            }
        }
    }
    out
}

/// A linear map from an (in_h, in_w) grid to an (out_h, out_w) grid where each
/// output cell is a weighted sum of at most four input cells. Applied
/// channel-wise.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl ResamplePlan {
    /// Bilinear plan; `map(oy, ox)` returns the continuous source coordinate
    /// (pixel-center convention), clamped to the grid.
    pub fn bilinear(
        (in_h, in_w): (usize, usize),
        (out_h, out_w): (usize, usize),
        map: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (sy, sx) = map(oy, ox);
                let sy = sy.clamp(0.0, (in_h - 1) as f64);
                let sx = sx.clamp(0.0, (in_w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(in_h - 1), (x0 + 1).min(in_w - 1));
                let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                let at = |y: usize, x: usize| (y * in_w + x) as u32;
                taps.push([
                    (at(y0, x0), (1.0 - wy) * (1.0 - wx)),
                    (at(y0, x1), (1.0 - wy) * wx),
                    (at(y1, x0), wy * (1.0 - wx)),
                    (at(y1, x1), wy * wx),
                ]);
            }
        }
        Self { in_h, in_w, out_h, out_w, taps }
    }

    /// Nearest-neighbor plan (single tap of weight one).
    pub fn nearest(
        (in_h, in_w): (usize, usize),
        (out_h, out_w): (usize, usize),
        map: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let taps = (0..out_h)
            .flat_map(|oy| (0..out_w).map(move |ox| (oy, ox)))
            .map(|(oy, ox)| {
                let (sy, sx) = map(oy, ox);
                let y = ((sy + 0.5).floor().max(0.0) as usize).min(in_h - 1);
                let x = ((sx + 0.5).floor().max(0.0) as usize).min(in_w - 1);
                let i = (y * in_w + x) as u32;
                [(i, 1.0), (i, 0.0), (i, 0.0), (i, 0.0)]
            })
            .collect();
        Self { in_h, in_w, out_h, out_w, taps }
    }

    /// Plain resize with half-pixel alignment (bilinear).
    pub fn resize(from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = from.0 as f64 / to.0 as f64;
        let sx = from.1 as f64 / to.1 as f64;
        Self::bilinear(from, to, |oy, ox| {
            ((oy as f64 + 0.5) * sy - 0.5, (ox as f64 + 0.5) * sx - 0.5)
        })
    }

    /// True when every output cell copies the input cell at the same index.
    pub fn is_identity(&self) -> bool {
        (self.in_h, self.in_w) == (self.out_h, self.out_w)
            && self.taps.iter().enumerate().all(|(o, t)| {
                t.iter().all(|&(i, w)| w == 0.0 || (i as usize == o && w == 1.0))
                    && t.iter().filter(|&&(_, w)| w != 0.0).count() == 1
            })
    }

    /// Source cell with the largest weight for each output cell.
    pub fn dominant_sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.iter().map(|t| {
            t.iter()
                .fold((0u32, f64::NEG_INFINITY), |best, &(i, w)| if w > best.1 { (i, w) } else { best })
                .0 as usize
        })
    }

    pub fn forward(&self, input: ArrayView3<f64>) -> Array3<f64> {
        let c = input.shape()[0];
        assert_eq!(&input.shape()[1..], &[self.in_h, self.in_w], "resample input shape");
        let mut out = Array3::<f64>::zeros((c, self.out_h, self.out_w));
        for ch in 0..c {
            let src = input.index_axis(Axis(0), ch);
            let src = src.as_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| {
                std::borrow::Cow::Owned(src.iter().copied().collect())
            });
            let mut dst = out.index_axis_mut(Axis(0), ch);
            let dst = dst.as_slice_mut().expect("fresh array");
            for (o, taps) in dst.iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|&(i, w)| w * src[i as usize]).sum();
            }
        }
        out
    }

    /// Adjoint of `forward`.
    pub fn backward(&self, grad_out: ArrayView3<f64>) -> Array3<f64> {
        let c = grad_out.shape()[0];
        let mut out = Array3::<f64>::zeros((c, self.in_h, self.in_w));
        for ch in 0..c {
            let g = grad_out.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            let dst = dst.as_slice_mut().expect("fresh array");
            for (gv, taps) in g.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    dst[i as usize] += w * gv;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn rand3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = rng_from_seed(seed);
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn normalized_pixels_have_unit_norm() {
        let x = rand3(1, (5, 4, 3));
        let (z, _) = l2_normalize(&x);
        for y in 0..4 {
            for xx in 0..3 {
                let n: f64 = (0..5).map(|c| z[[c, y, xx]].powi(2)).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = rand3(2, (4, 2, 3));
        let g = rand3(3, (4, 2, 3));
        let loss = |x: &Array3<f64>| (&l2_normalize(x).0 * &g).sum();
        let (z, n) = l2_normalize(&x);
        let grad = l2_normalize_backward(&z, &n, &g);
        let h = 1e-6;
        for idx in [[0, 0, 0], [3, 1, 2], [2, 0, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-8, "{fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn resample_backward_is_adjoint() {
        let plan = ResamplePlan::resize((3, 5), (7, 4));
        let x = rand3(4, (2, 3, 5));
        let y = rand3(5, (2, 7, 4));
        let lhs = (&plan.forward(x.view()) * &y).sum();
        let rhs = (&x * &plan.backward(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = rand3(6, (3, 6, 6));
        assert_eq!(ResamplePlan::resize((6, 6), (6, 6)).forward(x.view()), x);
    }
}
