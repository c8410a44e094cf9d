use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NN_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub coord: (usize, usize),
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub neighbors: Vec<Neighbor>,
    /// Fewer candidates than requested.
    pub truncated: bool,
}

/// Ranks corpus pixels by cosine distance to the query pixel. Candidates lie
/// on a grid of step `stride` aligned with the query coordinate; the query
/// pixel itself is skipped.
pub fn nearest_neighbors(
    query_id: &str,
    coord: (usize, usize),
    corpus: &[(String, Array3<f64>)],
    k: usize,
    stride: usize,
) -> Result<NeighborList> {
    let stride = stride.max(1);
    let (_, q) = corpus
        .iter()
        .find(|(id, _)| id == query_id)
        .ok_or_else(|| {
            let ids: Vec<&str> = corpus.iter().map(|(id, _)| id.as_str()).collect();
            Error::InvalidArgument(format!("unknown image `{query_id}`; available: {}", ids.join(", ")))
        })?;
    let (d, h, w) = q.dim();
    if coord.0 >= h || coord.1 >= w {
        return Err(Error::InvalidArgument(format!(
            "query ({}, {}) outside the {h}x{w} feature grid",
            coord.0, coord.1
        )));
    }
    let qv: Vec<f64> = (0..d).map(|c| q[[c, coord.0, coord.1]]).collect();
    let mut all = Vec::new();
    for (id, z) in corpus {
        let (zd, zh, zw) = z.dim();
        if zd != d {
            return Err(Error::Dimension { expected: d, got: zd });
        }
        for y in (coord.0 % stride..zh).step_by(stride) {
            for x in (coord.1 % stride..zw).step_by(stride) {
                if id == query_id && (y, x) == coord {
                    continue;
                }
                // Half squared distance equals cosine distance on unit vectors
                // and is exactly zero for identical ones.
                let dist = 0.5 * (0..d).map(|c| (z[[c, y, x]] - qv[c]).powi(2)).sum::<f64>();
                all.push(Neighbor {
                    image_id: id.clone(),
                    coord: (y, x),
                    distance: dist,
                });
            }
        }
    }
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let truncated = k > all.len();
    all.truncate(k);
    Ok(NeighborList { neighbors: all, truncated })
}
