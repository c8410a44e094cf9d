//! Prototype cross-entropy and its two-view compositions, cluster balancing,
//! and the parametric classifier loss used by the DeepCluster-style baseline.
//!
//! Pixel-grid losses are means over pixels and come with their gradient with
//! respect to the (unit-norm) feature map. Centroids are constants.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::clustering::Centroids;
use crate::error::{Error, Result};

/// Per-cluster loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterWeights(pub Vec<f64>);

impl ClusterWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mixing weights of the main and the over-clustering head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceCoefficients {
    pub k1: f64,
    pub k2: f64,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: what.into(),
            ids: vec![],
        })
    }
}

/// `1 - a·b` for unit vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    check_finite(a, "cosine distance input")?;
    check_finite(b, "cosine distance input")?;
    Ok(1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax over negative cosine distances to every centroid.
pub fn prototype_posteriors(z: &[f64], c: &Centroids) -> Result<Vec<f64>> {
    let logits = c
        .matrix()
        .rows()
        .into_iter()
        .map(|mu| cosine_distance(z, mu.as_slice().expect("row-major")).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    let lse = log_sum_exp(logits.iter().copied());
    Ok(logits.iter().map(|a| (a - lse).exp()).collect())
}

/// Weighted prototype cross-entropy of a single pixel embedding.
pub fn l_clust(z: &[f64], label: usize, c: &Centroids, w: &ClusterWeights) -> Result<f64> {
    let k = c.k();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    if w.len() != k {
        return Err(Error::Dimension { expected: k, got: w.len() });
    }
    let logits = c
        .matrix()
        .rows()
        .into_iter()
        .map(|mu| cosine_distance(z, mu.as_slice().expect("row-major")).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    if k == 1 {
        return Ok(0.0);
    }
    Ok(w.0[label] * (log_sum_exp(logits.iter().copied()) - logits[label]))
}

/// Standard softmax cross-entropy over classifier scores.
pub fn parametric_ce(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    check_finite(scores, "classifier scores")?;
    if scores.len() == 1 {
        return Ok(0.0);
    }
    Ok(log_sum_exp(scores.iter().copied()) - scores[label])
}

fn flat(z: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (d, h, w) = z.dim();
    z.view().into_shape_with_order((d, h * w)).expect("contiguous feature map")
}

fn check_grid(z: &Array3<f64>, labels: &Array2<u32>, k: usize, dim: usize) -> Result<()> {
    let (d, h, w) = z.dim();
    if d != dim {
        return Err(Error::Dimension { expected: dim, got: d });
    }
    if labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "label grid {:?} vs feature grid {:?}",
            labels.dim(),
            (h, w)
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: k,
        });
    }
    Ok(())
}

/// Weighted softmax cross-entropy on a (K, N) score matrix. Returns the mean
/// loss and dL/dscores.
fn weighted_ce(scores: Array2<f64>, labels: &Array2<u32>, w: &ClusterWeights) -> Result<(f64, Array2<f64>)> {
    let (k, n) = scores.dim();
    if w.len() != k {
        return Err(Error::Dimension { expected: k, got: w.len() });
    }
    let mut grad = scores;
    let mut total = 0.0;
    for (mut col, &y) in grad.columns_mut().into_iter().zip(labels.iter()) {
        let y = y as usize;
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = col.iter().map(|s| (s - m).exp()).sum();
        let lse = m + sum.ln();
        let wy = w.0[y];
        total += wy * (lse - col[y]);
        col.mapv_inplace(|s| wy * (s - lse).exp() / n as f64);
        col[y] -= wy / n as f64;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy".into(),
            ids: vec![],
        });
    }
    Ok((loss, grad))
}

/// Mean prototype loss over a (D, H, W) grid and its gradient.
pub fn clust_loss_grid(
    z: &Array3<f64>,
    labels: &Array2<u32>,
    c: &Centroids,
    w: &ClusterWeights,
) -> Result<(f64, Array3<f64>)> {
    check_grid(z, labels, c.k(), c.dim())?;
    if c.k() == 1 {
        return Ok((0.0, Array3::zeros(z.dim())));
    }
    let zf = flat(z);
    // Logits are -d = z·mu - 1; the constant cancels in the softmax.
    let scores = c.matrix().dot(&zf);
    let (loss, ds) = weighted_ce(scores, labels, w)?;
    let dz = c.matrix().t().dot(&ds);
    Ok((loss, dz.into_shape_with_order(z.dim()).expect("contiguous")))
}

/// Within-view and cross-view losses for one cluster head, with gradients.
#[derive(Debug, Clone)]
pub struct TwoViewLoss {
    pub within: f64,
    pub cross: f64,
    /// (dL_within/dz1, dL_within/dz2).
    pub within_grad: (Array3<f64>, Array3<f64>),
    /// (dL_cross/dz1, dL_cross/dz2).
    pub cross_grad: (Array3<f64>, Array3<f64>),
}

pub struct ViewTargets<'a> {
    pub labels: &'a Array2<u32>,
    pub centroids: &'a Centroids,
    pub weights: &'a ClusterWeights,
}

/// `within` pairs each view with its own clustering; `cross` pairs each view
/// with the other view's labels and centroids.
pub fn within_and_cross(z1: &Array3<f64>, z2: &Array3<f64>, v1: &ViewTargets, v2: &ViewTargets) -> Result<TwoViewLoss> {
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!("views differ: {:?} vs {:?}", z1.dim(), z2.dim())));
    }
    let (a, ga) = clust_loss_grid(z1, v1.labels, v1.centroids, v1.weights)?;
    let (b, gb) = clust_loss_grid(z2, v2.labels, v2.centroids, v2.weights)?;
    let (c, gc) = clust_loss_grid(z1, v2.labels, v2.centroids, v2.weights)?;
    let (d, gd) = clust_loss_grid(z2, v1.labels, v1.centroids, v1.weights)?;
    Ok(TwoViewLoss {
        within: a + b,
        cross: c + d,
        within_grad: (ga, gb),
        cross_grad: (gc, gd),
    })
}

/// Average of the within-view and cross-view objectives.
pub fn total_loss(within: f64, cross: f64) -> Result<f64> {
    if !within.is_finite() || !cross.is_finite() {
        return Err(Error::NonFinite {
            context: "total loss".into(),
            ids: vec![],
        });
    }
    Ok((within + cross) / 2.0)
}

/// `λ1 = log K2 / (log K1 + log K2)`, `λ2 = 1 - λ1`.
pub fn balance(k1: usize, k2: usize) -> Result<BalanceCoefficients> {
    if k1 < 2 || k2 < 2 {
        return Err(Error::InvalidArgument(format!(
            "balance needs both cluster counts >= 2, got {k1} and {k2}"
        )));
    }
    let (l1, l2) = ((k1 as f64).ln(), (k2 as f64).ln());
    let k1w = l2 / (l1 + l2);
    Ok(BalanceCoefficients { k1: k1w, k2: 1.0 - k1w })
}

/// `w_k = N / (K · max(n_k, 1))`.
pub fn cluster_size_weights(counts: &[u64], total: u64) -> ClusterWeights {
    let k = counts.len() as f64;
    ClusterWeights(
        counts
            .iter()
            .map(|&n| total as f64 / (k * n.max(1) as f64))
            .collect(),
    )
}

/// Mean squared distance between corresponding pixels of two views, with
/// gradients for both.
pub fn mse_cross_view(z1: &Array3<f64>, z2: &Array3<f64>) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!("views differ: {:?} vs {:?}", z1.dim(), z2.dim())));
    }
    let n = (z1.shape()[1] * z1.shape()[2]) as f64;
    let diff = z1 - z2;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let g1 = diff.mapv(|v| 2.0 * v / n);
    let g2 = -&g1;
    Ok((loss, g1, g2))
}

/// A 1x1 classifier head (K scores per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((k, dim)),
            bias: Array1::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, z: &Array3<f64>) -> Array2<f64> {
        let mut s = self.weight.dot(&flat(z));
        for (mut row, &b) in s.rows_mut().into_iter().zip(&self.bias) {
            row += b;
        }
        s
    }
}

/// Gradients of the parametric loss.
pub struct HeadGrad {
    pub d_z: Array3<f64>,
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
}

/// Mean weighted softmax cross-entropy of a linear head over a grid.
pub fn parametric_ce_grid(
    z: &Array3<f64>,
    labels: &Array2<u32>,
    head: &LinearHead,
    w: &ClusterWeights,
) -> Result<(f64, HeadGrad)> {
    check_grid(z, labels, head.k(), head.weight.ncols())?;
    if head.k() == 1 {
        return Ok((
            0.0,
            HeadGrad {
                d_z: Array3::zeros(z.dim()),
                d_weight: Array2::zeros(head.weight.dim()),
                d_bias: Array1::zeros(1),
            },
        ));
    }
    let (loss, ds) = weighted_ce(head.scores(z), labels, w)?;
    let zf = flat(z);
    let d_z = head.weight.t().dot(&ds).into_shape_with_order(z.dim()).expect("contiguous");
    let d_weight = ds.dot(&zf.t());
    let d_bias = ds.sum_axis(Axis(1));
    Ok((loss, HeadGrad { d_z, d_weight, d_bias }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::l2_normalize;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng as _;

    fn centroids(rows: Array2<f64>) -> Centroids {
        Centroids::new(rows, 1).unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [1.0, 0.0];
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(cosine_distance(&a, &[0.0, 1.0]).unwrap(), 1.0);
        let s = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(cosine_distance(&a, &[s, s]).unwrap(), 0.29289, epsilon = 1e-5);
        assert!(cosine_distance(&[f64::NAN, 0.0], &a).is_err());
    }

    #[test]
    fn l_clust_examples() {
        let one = centroids(array![[1.0, 0.0]]);
        assert_eq!(l_clust(&[0.0, 1.0], 0, &one, &ClusterWeights::uniform(1)).unwrap(), 0.0);

        let two = centroids(array![[1.0, 0.0], [-1.0, 0.0]]);
        let v = l_clust(&[1.0, 0.0], 0, &two, &ClusterWeights::uniform(2)).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-2f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.12693, epsilon = 1e-5);

        // Equidistant centroids: log K.
        let three = centroids(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s = 1.0 / 3f64.sqrt();
        let v = l_clust(&[s, s, s], 2, &three, &ClusterWeights::uniform(3)).unwrap();
        assert_abs_diff_eq!(v, 3f64.ln(), epsilon = 1e-12);
        assert!(l_clust(&[1.0, 0.0], 2, &two, &ClusterWeights::uniform(2)).is_err());
    }

    #[test]
    fn posteriors_sum_to_one() {
        let mut rng = rng_from_seed(1);
        let m = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let c = Centroids::from_unnormalized(m, 1).unwrap();
        let mut z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.iter_mut().for_each(|v| *v /= n);
        let p = prototype_posteriors(&z, &c).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parametric_ce_examples() {
        assert_abs_diff_eq!(parametric_ce(&[1.0, 0.0], 0).unwrap(), 0.31326, epsilon = 1e-5);
        assert_abs_diff_eq!(parametric_ce(&[0.5; 4], 1).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let v = parametric_ce(&[20.0, 0.0], 0).unwrap();
        assert!((v - 2.061e-9).abs() < 1e-11, "{v}");
        assert!(parametric_ce(&[0.0], 1).is_err());
    }

    #[test]
    fn total_and_balance() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.7, 0.7).unwrap(), 0.7);
        assert_abs_diff_eq!(total_loss(0.4, 0.6).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(total_loss(0.4, 0.6).unwrap(), total_loss(0.6, 0.4).unwrap());
        assert!(total_loss(f64::INFINITY, 0.0).is_err());

        let b = balance(10, 10).unwrap();
        assert_eq!((b.k1, b.k2), (0.5, 0.5));
        let b = balance(27, 100).unwrap();
        assert_abs_diff_eq!(b.k1, 0.582859, epsilon = 1e-6);
        assert_abs_diff_eq!(b.k2, 0.417141, epsilon = 1e-6);
        assert_eq!(b.k1 + b.k2, 1.0);
        let b10 = 100f64.log10() / (27f64.log10() + 100f64.log10());
        assert_abs_diff_eq!(b.k1, b10, epsilon = 1e-12);
        assert!(balance(1, 5).is_err());
    }

    #[test]
    fn size_weights() {
        assert_eq!(cluster_size_weights(&[10, 10], 20).0, vec![1.0, 1.0]);
        let w = cluster_size_weights(&[30, 10], 40).0;
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 2.0, epsilon = 1e-15);
        // Pixel-weighted mean of the weights is one when no cluster is empty.
        let counts = [7u64, 1, 12, 30];
        let n: u64 = counts.iter().sum();
        let w = cluster_size_weights(&counts, n);
        let mean: f64 = counts.iter().zip(&w.0).map(|(&c, w)| c as f64 * w).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
    }

    fn random_unit_grid(seed: u64, d: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = rng_from_seed(seed);
        l2_normalize(&Array3::from_shape_fn((d, h, w), |_| rng.random_range(-1.0..1.0))).0
    }

    #[test]
    fn grid_loss_equals_mean_of_pixel_losses() {
        let z1 = random_unit_grid(1, 3, 2, 2);
        let z2 = random_unit_grid(2, 3, 2, 2);
        let mut rng = rng_from_seed(3);
        let c1 = Centroids::from_unnormalized(Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)), 1).unwrap();
        let c2 = Centroids::from_unnormalized(Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)), 2).unwrap();
        let y1 = array![[0u32, 1], [1, 1]];
        let y2 = array![[1u32, 0], [0, 1]];
        let w1 = ClusterWeights(vec![0.5, 1.5]);
        let w2 = ClusterWeights::uniform(2);
        let out = within_and_cross(
            &z1,
            &z2,
            &ViewTargets { labels: &y1, centroids: &c1, weights: &w1 },
            &ViewTargets { labels: &y2, centroids: &c2, weights: &w2 },
        )
        .unwrap();
        let px = |z: &Array3<f64>, y: usize, x: usize| -> Vec<f64> { (0..3).map(|c| z[[c, y, x]]).collect() };
        let (mut within, mut cross) = (0.0, 0.0);
        for y in 0..2 {
            for x in 0..2 {
                within += l_clust(&px(&z1, y, x), y1[[y, x]] as usize, &c1, &w1).unwrap()
                    + l_clust(&px(&z2, y, x), y2[[y, x]] as usize, &c2, &w2).unwrap();
                cross += l_clust(&px(&z1, y, x), y2[[y, x]] as usize, &c2, &w2).unwrap()
                    + l_clust(&px(&z2, y, x), y1[[y, x]] as usize, &c1, &w1).unwrap();
            }
        }
        assert_abs_diff_eq!(out.within, within / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.cross, cross / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_views_make_cross_equal_within() {
        let z = random_unit_grid(4, 5, 3, 3);
        let mut rng = rng_from_seed(5);
        let c = Centroids::from_unnormalized(Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0)), 1).unwrap();
        let y = Array2::from_shape_fn((3, 3), |(a, b)| ((a + b) % 4) as u32);
        let w = ClusterWeights::uniform(4);
        let t = ViewTargets { labels: &y, centroids: &c, weights: &w };
        let out = within_and_cross(&z, &z, &t, &t).unwrap();
        assert_eq!(out.within, out.cross);

        let one = Centroids::from_unnormalized(Array2::ones((1, 5)), 1).unwrap();
        let y0 = Array2::zeros((3, 3));
        let w1 = ClusterWeights::uniform(1);
        let t1 = ViewTargets { labels: &y0, centroids: &one, weights: &w1 };
        let out = within_and_cross(&z, &z, &t1, &t1).unwrap();
        assert_eq!((out.within, out.cross), (0.0, 0.0));
    }

    #[test]
    fn mse_identities() {
        let z1 = random_unit_grid(6, 4, 3, 2);
        assert_eq!(mse_cross_view(&z1, &z1).unwrap().0, 0.0);
        assert_abs_diff_eq!(mse_cross_view(&z1, &(-&z1)).unwrap().0, 4.0, epsilon = 1e-12);
        let z2 = random_unit_grid(7, 4, 3, 2);
        let mean_cos: f64 = (0..3)
            .flat_map(|y| (0..2).map(move |x| (y, x)))
            .map(|(y, x)| {
                let a: Vec<f64> = (0..4).map(|c| z1[[c, y, x]]).collect();
                let b: Vec<f64> = (0..4).map(|c| z2[[c, y, x]]).collect();
                cosine_distance(&a, &b).unwrap()
            })
            .sum::<f64>()
            / 6.0;
        assert_abs_diff_eq!(mse_cross_view(&z1, &z2).unwrap().0, 2.0 * mean_cos, epsilon = 1e-12);
        assert!(mse_cross_view(&z1, &random_unit_grid(8, 4, 2, 3)).is_err());
    }

    fn fd_check(z: &Array3<f64>, analytic: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) {
        let h = 1e-6;
        for (i, &g) in analytic.iter().enumerate() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_slice_mut().unwrap()[i] += h;
            zm.as_slice_mut().unwrap()[i] -= h;
            let num = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((num - g).abs() < 1e-7 * (1.0 + g.abs()), "coord {i}: {num} vs {g}");
        }
    }

    #[test]
    fn grid_gradients_match_finite_differences() {
        let z1 = random_unit_grid(10, 4, 2, 3);
        let z2 = random_unit_grid(11, 4, 2, 3);
        let mut rng = rng_from_seed(12);
        let c1 = Centroids::from_unnormalized(Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)), 1).unwrap();
        let c2 = Centroids::from_unnormalized(Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)), 2).unwrap();
        let y1 = Array2::from_shape_fn((2, 3), |(a, b)| ((a + 2 * b) % 3) as u32);
        let y2 = Array2::from_shape_fn((2, 3), |(a, b)| ((2 * a + b) % 3) as u32);
        let w1 = ClusterWeights(vec![0.7, 1.2, 1.1]);
        let w2 = ClusterWeights(vec![1.5, 0.5, 1.0]);
        let t1 = ViewTargets { labels: &y1, centroids: &c1, weights: &w1 };
        let t2 = ViewTargets { labels: &y2, centroids: &c2, weights: &w2 };
        let out = within_and_cross(&z1, &z2, &t1, &t2).unwrap();
        fd_check(&z1, &out.within_grad.0, |z| within_and_cross(z, &z2, &t1, &t2).unwrap().within);
        fd_check(&z2, &out.within_grad.1, |z| within_and_cross(&z1, z, &t1, &t2).unwrap().within);
        fd_check(&z1, &out.cross_grad.0, |z| within_and_cross(z, &z2, &t1, &t2).unwrap().cross);
        fd_check(&z2, &out.cross_grad.1, |z| within_and_cross(&z1, z, &t1, &t2).unwrap().cross);
        let (_, g1, _) = mse_cross_view(&z1, &z2).unwrap();
        fd_check(&z1, &g1, |z| mse_cross_view(z, &z2).unwrap().0);

        let mut head = LinearHead::zeros(3, 4);
        head.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        head.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let (_, hg) = parametric_ce_grid(&z1, &y1, &head, &w1).unwrap();
        fd_check(&z1, &hg.d_z, |z| parametric_ce_grid(z, &y1, &head, &w1).unwrap().0);
        let f = |w: &Array3<f64>| {
            let h = LinearHead { weight: w.clone().into_shape_with_order((3, 4)).unwrap(), bias: head.bias.clone() };
            parametric_ce_grid(&z1, &y1, &h, &w1).unwrap().0
        };
        let w3 = head.weight.clone().into_shape_with_order((1, 3, 4)).unwrap();
        fd_check(&w3, &hg.d_weight.clone().into_shape_with_order((1, 3, 4)).unwrap(), f);
    }
}
