//! Mini-batch spherical k-means.

use std::collections::HashSet;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;

use super::Centroids;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Pixel count consumed by the default initialization (50 batches of 128).
pub const REFERENCE_INIT_PIXELS: usize = 50 * 128;

const ASSIGN_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub init_batches: usize,
    pub batch_size: usize,
    /// Centroids are refreshed every this many mini-batches.
    pub update_period: usize,
    /// Lloyd restarts on the initialization sample; the best objective wins.
    pub n_init: usize,
    pub init_iters: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            init_batches: 50,
            batch_size: 128,
            update_period: 20,
            n_init: 3,
            init_iters: 50,
        }
    }

    /// Defaults, shrunk proportionally when the dataset holds fewer pixels
    /// than the default initialization would consume.
    pub fn for_dataset(k: usize, total_pixels: usize) -> Self {
        let mut cfg = Self::new(k);
        if total_pixels < REFERENCE_INIT_PIXELS {
            let f = total_pixels as f64 / REFERENCE_INIT_PIXELS as f64;
            cfg.init_batches = ((50.0 * f.sqrt()).ceil() as usize).max(1);
            cfg.batch_size = (total_pixels / cfg.init_batches).max(1);
        }
        cfg
    }

    pub fn init_pixels(&self) -> usize {
        self.init_batches * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k-means needs k >= 1".into()));
        }
        if self.init_batches == 0 || self.batch_size == 0 || self.update_period == 0 || self.n_init == 0 {
            return Err(Error::Config(format!("k-means sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Running state of one mini-batch k-means fit.
#[derive(Debug, Clone)]
pub struct KMeansState {
    config: KMeansConfig,
    centroids: Centroids,
    sums: Array2<f64>,
    counts: Vec<u64>,
    window_counts: Vec<u64>,
    /// One uniformly drawn member per cluster over the current update window.
    window_sample: Vec<Option<Array1<f64>>>,
    iteration: u64,
    rng: Rng,
}

impl KMeansState {
    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn into_centroids(self) -> Centroids {
        self.centroids
    }

    /// Assignment counts accumulated since initialization.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &KMeansConfig {
        &self.config
    }

    /// Replaces centroids by the normalized running means, re-seeding clusters
    /// that received nothing during the window.
    pub fn refresh(&mut self) {
        let k = self.config.k;
        let largest = (0..k).max_by_key(|&j| (self.window_counts[j], std::cmp::Reverse(j)));
        for j in 0..k {
            if self.window_counts[j] > 0 {
                continue;
            }
            let donor = largest.and_then(|l| self.window_sample[l].clone());
            if let Some(x) = donor {
                // Small jitter keeps the new centroid off the donor's.
                let mut v = x.mapv(|t| t + 1e-6 * (self.rng.random::<f64>() - 0.5));
                let n = v.dot(&v).sqrt();
                v /= n;
                self.sums.row_mut(j).assign(&v);
                self.counts[j] = 1;
            }
        }
        let mut m = self.centroids.matrix().clone();
        for j in 0..k {
            let row = self.sums.row(j);
            let n = row.dot(&row).sqrt();
            if n > 0.0 && n.is_finite() {
                m.row_mut(j).assign(&(&row / n));
            }
        }
        let view = self.centroids.view();
        self.centroids = Centroids::new(m, view).expect("rows are unit-norm");
        self.window_counts.iter_mut().for_each(|c| *c = 0);
        self.window_sample.iter_mut().for_each(|s| *s = None);
    }
}

/// Nearest centroid for every row of `x`, in parallel over row chunks.
pub fn assign_rows(x: ArrayView2<f64>, c: &Centroids) -> Result<Vec<u32>> {
    if x.ncols() != c.dim() {
        return Err(Error::Dimension {
            expected: c.dim(),
            got: x.ncols(),
        });
    }
    let chunks: Vec<Vec<u32>> = x
        .axis_chunks_iter(Axis(0), ASSIGN_CHUNK)
        .into_par_iter()
        .map(|chunk| c.nearest(chunk).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Spherical k-means objective: summed cosine distance to the assigned centroid.
pub fn objective(x: ArrayView2<f64>, c: &Centroids, labels: &[u32]) -> f64 {
    x.rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| 1.0 - row.dot(&c.matrix().row(l as usize)))
        .sum()
}

fn count_distinct(x: ArrayView2<f64>, limit: usize) -> usize {
    let mut seen = HashSet::new();
    for row in x.rows() {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

fn kmeans_pp(x: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = Array2::zeros((k, x.ncols()));
    chosen.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut best: Vec<f64> = x.rows().into_iter().map(|r| (1.0 - r.dot(&chosen.row(0))).max(0.0)).collect();
    for j in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        chosen.row_mut(j).assign(&x.row(pick));
        for (b, r) in best.iter_mut().zip(x.rows()) {
            *b = b.min((1.0 - r.dot(&chosen.row(j))).max(0.0));
        }
    }
    chosen
}

/// Full-batch spherical Lloyd iterations; returns centroids and objective.
fn lloyd(x: ArrayView2<f64>, init: Array2<f64>, iters: usize, view: u8) -> Result<(Centroids, f64)> {
    let k = init.nrows();
    let mut c = Centroids::from_unnormalized(init, view)?;
    let mut labels = assign_rows(x, &c)?;
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros((k, x.ncols()));
        let mut counts = vec![0usize; k];
        for (row, &l) in x.rows().into_iter().zip(&labels) {
            sums.row_mut(l as usize).scaled_add(1.0, &row);
            counts[l as usize] += 1;
        }
        let dists: Vec<f64> = x
            .rows()
            .into_iter()
            .zip(&labels)
            .map(|(r, &l)| 1.0 - r.dot(&c.matrix().row(l as usize)))
            .collect();
        let mut m = c.matrix().clone();
        let mut taken = HashSet::new();
        for j in 0..k {
            let row = sums.row(j);
            let n = row.dot(&row).sqrt();
            if counts[j] > 0 && n > 0.0 {
                m.row_mut(j).assign(&(&row / n));
            } else {
                // Empty cluster: move it onto the worst-served point.
                let far = (0..x.nrows())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.insert(far);
                m.row_mut(j).assign(&x.row(far));
            }
        }
        c = Centroids::new(m, view)?;
        let next = assign_rows(x, &c)?;
        if next == labels {
            break;
        }
        labels = next;
    }
    let obj = objective(x, &c, &labels);
    Ok((c, obj))
}

/// Fits initial centroids on the first `init_batches × batch_size` rows of
/// `pixels` (k-means++ seeding, then Lloyd on that sample).
pub fn init_centroids(pixels: ArrayView2<f64>, config: &KMeansConfig, view: u8, mut rng: Rng) -> Result<KMeansState> {
    config.validate()?;
    let n = pixels.nrows().min(config.init_pixels());
    let sample = pixels.slice(s![..n, ..]);
    let distinct = count_distinct(sample, config.k);
    if distinct < config.k {
        return Err(Error::Clustering(format!(
            "need {} distinct vectors to initialize, found {distinct}",
            config.k
        )));
    }
    let mut best: Option<(Centroids, f64)> = None;
    for _ in 0..config.n_init {
        let seeds = kmeans_pp(sample, config.k, &mut rng);
        let (c, obj) = lloyd(sample, seeds, config.init_iters, view)?;
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((c, obj));
        }
    }
    let (centroids, _) = best.expect("n_init >= 1");
    let (k, d) = (config.k, pixels.ncols());
    Ok(KMeansState {
        config: config.clone(),
        centroids,
        sums: Array2::zeros((k, d)),
        counts: vec![0; k],
        window_counts: vec![0; k],
        window_sample: vec![None; k],
        iteration: 0,
        rng,
    })
}

/// Accumulates one mini-batch into the running means; centroids change only
/// when the iteration counter reaches a multiple of `update_period`.
pub fn minibatch_update(state: &mut KMeansState, batch: ArrayView2<f64>) -> Result<()> {
    let labels = assign_rows(batch, &state.centroids)?;
    for (row, &l) in batch.rows().into_iter().zip(&labels) {
        let l = l as usize;
        state.sums.row_mut(l).scaled_add(1.0, &row);
        state.counts[l] += 1;
        state.window_counts[l] += 1;
        // Reservoir of size one per cluster.
        if state.rng.random_range(0..state.window_counts[l]) == 0 {
            state.window_sample[l] = Some(row.to_owned());
        }
    }
    state.iteration += 1;
    if state.iteration % state.config.update_period as u64 == 0 {
        state.refresh();
    }
    Ok(())
}

/// Initializes on a prefix of `pixels`, streams one pass of mini-batches in
/// row order, refreshes a final time, and returns the fitted state.
pub fn fit(pixels: ArrayView2<f64>, config: &KMeansConfig, view: u8, rng: Rng) -> Result<KMeansState> {
    fit_passes(pixels, config, view, rng, 1)
}

pub fn fit_passes(pixels: ArrayView2<f64>, config: &KMeansConfig, view: u8, rng: Rng, passes: usize) -> Result<KMeansState> {
    let mut state = init_centroids(pixels, config, view, rng)?;
    for _ in 0..passes {
        for batch in pixels.axis_chunks_iter(Axis(0), config.batch_size) {
            minibatch_update(&mut state, batch)?;
        }
    }
    if state.iteration % config.update_period as u64 != 0 {
        state.refresh();
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn random_unit(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
        unit_rows(Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng)))
    }

    /// Two tight clouds around +a and -a.
    fn antipodal(n_each: usize, d: usize, spread: f64, rng: &mut Rng) -> (Array2<f64>, Array1<f64>) {
        let a = random_unit(1, d, rng).row(0).to_owned();
        let mut m = Array2::zeros((2 * n_each, d));
        for i in 0..2 * n_each {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let noise: Array1<f64> = (0..d).map(|_| spread * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>().into();
            m.row_mut(i).assign(&(&a * sign + noise));
        }
        (unit_rows(m), a)
    }

    fn mean_direction(m: ArrayView2<f64>) -> Array1<f64> {
        let s = m.sum_axis(Axis(0));
        let n = s.dot(&s).sqrt();
        s / n
    }

    #[test]
    fn assign_examples() {
        let c = Centroids::new(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], 1).unwrap();
        let (l, d) = c.nearest(array![[0.0, -1.0]].view()).unwrap();
        assert_eq!((l[0], d[0]), (3, 0.0));
        let one = Centroids::new(array![[1.0, 0.0]], 1).unwrap();
        assert_eq!(assign_rows(random_unit(9, 2, &mut rng_from_seed(0)).view(), &one).unwrap(), vec![0; 9]);
        // Equidistant: lowest index wins.
        let s = 0.5f64.sqrt();
        let (l, _) = c.nearest(array![[s, s]].view()).unwrap();
        assert_eq!(l[0], 0);
        assert!(assign_rows(array![[1.0, 0.0, 0.0]].view(), &c).is_err());
    }

    #[test]
    fn assignment_is_optimal() {
        let mut rng = rng_from_seed(4);
        let x = random_unit(500, 6, &mut rng);
        let c = Centroids::new(random_unit(7, 6, &mut rng), 1).unwrap();
        let labels = assign_rows(x.view(), &c).unwrap();
        let d = c.distances(x.view()).unwrap();
        for (row, &l) in d.rows().into_iter().zip(&labels) {
            assert!(row.iter().all(|&v| row[l as usize] <= v));
        }
    }

    #[test]
    fn init_recovers_antipodal_clouds() {
        let mut rng = rng_from_seed(11);
        let (x, a) = antipodal(200, 8, 0.05, &mut rng);
        let cfg = KMeansConfig::for_dataset(2, x.nrows());
        let state = init_centroids(x.view(), &cfg, 1, rng_from_seed(3)).unwrap();
        let pos: Vec<usize> = (0..x.nrows()).filter(|i| i % 2 == 0).collect();
        let neg: Vec<usize> = (0..x.nrows()).filter(|i| i % 2 == 1).collect();
        let mp = mean_direction(x.select(Axis(0), &pos).view());
        let mn = mean_direction(x.select(Axis(0), &neg).view());
        let tol = 5f64.to_radians().cos();
        let c = state.centroids().matrix();
        let (p, n) = if c.row(0).dot(&a) > 0.0 { (0, 1) } else { (1, 0) };
        assert!(c.row(p).dot(&mp) > tol);
        assert!(c.row(n).dot(&mn) > tol);
    }

    #[test]
    fn init_edge_cases() {
        let x = Array2::from_shape_fn((10, 3), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        let cfg = KMeansConfig::for_dataset(1, 10);
        let st = init_centroids(x.view(), &cfg, 1, rng_from_seed(0)).unwrap();
        assert_eq!(st.centroids().matrix(), &array![[0.0, 1.0, 0.0]]);
        let cfg2 = KMeansConfig::for_dataset(2, 10);
        assert!(matches!(init_centroids(x.view(), &cfg2, 1, rng_from_seed(0)), Err(Error::Clustering(_))));
        let d = KMeansConfig::new(5);
        assert_eq!(d.init_pixels(), 6400);
        let small = KMeansConfig::for_dataset(5, 1600);
        assert!(small.init_pixels() <= 1600 && small.init_batches < 50 && small.batch_size < 128);
    }

    #[test]
    fn fixed_point_batch_leaves_centroids() {
        let mut rng = rng_from_seed(2);
        let x = random_unit(50, 4, &mut rng);
        let mut cfg = KMeansConfig::for_dataset(3, 50);
        cfg.update_period = 1;
        let mut st = init_centroids(x.view(), &cfg, 1, rng_from_seed(1)).unwrap();
        let before = st.centroids().clone();
        minibatch_update(&mut st, before.matrix().view()).unwrap();
        let after = st.centroids().matrix();
        assert!((after - before.matrix()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn centroids_frozen_between_updates() {
        let mut rng = rng_from_seed(5);
        let x = random_unit(4000, 5, &mut rng);
        let mut cfg = KMeansConfig::new(4);
        cfg.init_batches = 4;
        cfg.batch_size = 64;
        let mut st = init_centroids(x.view(), &cfg, 1, rng_from_seed(1)).unwrap();
        let start = st.centroids().clone();
        let mut batches = x.axis_chunks_iter(Axis(0), 64);
        for _ in 0..19 {
            minibatch_update(&mut st, batches.next().unwrap()).unwrap();
            assert_eq!(st.centroids(), &start);
        }
        minibatch_update(&mut st, batches.next().unwrap()).unwrap();
        assert_ne!(st.centroids(), &start);
        assert_eq!(st.iteration(), 20);
    }

    #[test]
    fn objective_non_increasing_at_boundaries() {
        let mut rng = rng_from_seed(8);
        let (x, _) = antipodal(100, 6, 0.4, &mut rng);
        let mut cfg = KMeansConfig::new(2);
        cfg.init_batches = 1;
        cfg.batch_size = 10;
        cfg.n_init = 1;
        cfg.init_iters = 0;
        cfg.update_period = x.nrows() / cfg.batch_size;
        let mut st = init_centroids(x.view(), &cfg, 1, rng_from_seed(2)).unwrap();
        let eval = |st: &KMeansState| {
            let l = assign_rows(x.view(), st.centroids()).unwrap();
            objective(x.view(), st.centroids(), &l)
        };
        let mut prev = eval(&st);
        for _ in 0..5 {
            for b in x.axis_chunks_iter(Axis(0), cfg.batch_size) {
                minibatch_update(&mut st, b).unwrap();
            }
            let now = eval(&st);
            assert!(now <= prev + 1e-9, "{now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let mut rng = rng_from_seed(9);
        let x = random_unit(64, 3, &mut rng);
        let mut cfg = KMeansConfig::for_dataset(2, 64);
        cfg.update_period = 1;
        let mut st = init_centroids(x.view(), &cfg, 1, rng_from_seed(1)).unwrap();
        // A batch that lands entirely in one cluster.
        let c0 = st.centroids().matrix().row(0).to_owned();
        let batch = Array2::from_shape_fn((8, 3), |(_, j)| c0[j]);
        minibatch_update(&mut st, batch.view()).unwrap();
        let m = st.centroids().matrix();
        assert!(m.iter().all(|v| v.is_finite()));
        assert_eq!(st.counts()[1], 1);
        assert!(m.row(1).dot(&c0) > 0.999);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = rng_from_seed(10);
        let x = random_unit(3000, 4, &mut rng);
        let cfg = KMeansConfig::for_dataset(5, 3000);
        let a = fit(x.view(), &cfg, 1, rng_from_seed(1)).unwrap();
        let b = fit(x.view(), &cfg, 1, rng_from_seed(1)).unwrap();
        assert_eq!(a.centroids(), b.centroids());
    }
}
