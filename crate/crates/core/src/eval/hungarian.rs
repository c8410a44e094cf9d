//! Maximum-weight injective matching of predicted clusters to classes.

use serde::{Deserialize, Serialize};

use super::ConfusionMatrix;

/// `pred_to_gt[k]` is the class matched to cluster `k`, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub pred_to_gt: Vec<Option<usize>>,
}

impl Matching {
    pub fn identity(n: usize) -> Self {
        Self {
            pred_to_gt: (0..n).map(Some).collect(),
        }
    }

    /// Cluster matched to class `gt`.
    pub fn gt_to_pred(&self, gt: usize) -> Option<usize> {
        self.pred_to_gt.iter().position(|&m| m == Some(gt))
    }

    /// Total count on matched cells.
    pub fn matched_mass(&self, cm: &ConfusionMatrix) -> u64 {
        self.pred_to_gt
            .iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| cm.counts[[p, g]]))
            .sum()
    }
}

/// Min-cost square assignment (shortest augmenting paths with potentials).
/// Returns `col_of_row`.
fn solve_min(cost: &[Vec<i128>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Matching that maximizes the summed confusion counts. Rectangular matrices
/// are padded with zero rows or columns; padded partners mean "unmatched".
pub fn hungarian_match(cm: &ConfusionMatrix) -> Matching {
    let (kp, kg) = cm.counts.dim();
    let n = kp.max(kg);
    let max = cm.counts.iter().copied().max().unwrap_or(0) as i128;
    let cost: Vec<Vec<i128>> = (0..n)
        .map(|p| {
            (0..n)
                .map(|g| {
                    let c = if p < kp && g < kg { cm.counts[[p, g]] as i128 } else { 0 };
                    max - c
                })
                .collect()
        })
        .collect();
    let cols = solve_min(&cost);
    Matching {
        pred_to_gt: (0..kp).map(|p| Some(cols[p]).filter(|&g| g < kg)).collect(),
    }
}
