use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-5;

/// K unit-norm prototypes of dimension D, tagged with the view they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    matrix: Array2<f64>,
    view: u8,
}

impl Centroids {
    /// Wraps a K×D matrix whose rows are already unit-norm.
    pub fn new(matrix: Array2<f64>, view: u8) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Shape(format!("centroid matrix {:?} is empty", matrix.dim())));
        }
        for (k, row) in matrix.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("centroid {k}"),
                    ids: vec![],
                });
            }
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!("centroid {k} has norm {n}")));
            }
        }
        Ok(Self { matrix, view })
    }

    /// Normalizes every row first; a zero row is an error.
    pub fn from_unnormalized(mut matrix: Array2<f64>, view: u8) -> Result<Self> {
        for (k, mut row) in matrix.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::Clustering(format!("centroid {k} has zero norm")));
            }
            row /= n;
        }
        Self::new(matrix, view)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn view(&self) -> u8 {
        self.view
    }

    pub fn with_view(mut self, view: u8) -> Self {
        self.view = view;
        self
    }

    /// Cosine distances `1 - x·μ` of every row of `x` (N×D) to every centroid.
    pub fn distances(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let mut d = x.dot(&self.matrix.t());
        d.mapv_inplace(|v| 1.0 - v);
        Ok(d)
    }

    /// Nearest centroid per row, ties to the lowest index, plus its distance.
    pub fn nearest(&self, x: ArrayView2<f64>) -> Result<(Vec<u32>, Vec<f64>)> {
        let d = self.distances(x)?;
        Ok(d.axis_iter(Axis(0))
            .map(|row| {
                let mut best = (0u32, row[0]);
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v < best.1 {
                        best = (k as u32, v);
                    }
                }
                best
            })
            .unzip())
    }
}
