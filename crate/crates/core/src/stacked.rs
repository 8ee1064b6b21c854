//! Stacked M-estimation: blocks of estimating equations sharing one
//! parameter vector, with the sandwich covariance `A^{-1} B A^{-T}`.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{MeError, Result};
use crate::linalg;

struct Block {
    name: String,
    rows: Range<usize>,
    scores: Option<DMatrix<f64>>,
    jacobian: DMatrix<f64>,
}

/// A square system of estimating equations. Each block contributes
/// per-subject residuals at the estimate (`None` for blocks that do not
/// depend on the data, whose rows contribute nothing to `B`) and the mean
/// Jacobian of its rows with respect to the full parameter vector.
pub struct StackedSystem {
    n: usize,
    dim: usize,
    blocks: Vec<Block>,
    next_row: usize,
}

impl StackedSystem {
    pub fn new(n: usize, dim: usize) -> Self {
        StackedSystem {
            n,
            dim,
            blocks: Vec::new(),
            next_row: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends a block and returns its row range.
    pub fn push(
        &mut self,
        name: &str,
        scores: Option<DMatrix<f64>>,
        jacobian: DMatrix<f64>,
    ) -> Result<Range<usize>> {
        let rows = jacobian.nrows();
        if jacobian.ncols() != self.dim {
            return Err(MeError::Inference {
                msg: format!("block '{name}' Jacobian has {} columns", jacobian.ncols()),
                rank: 0,
                dim: self.dim,
            });
        }
        if let Some(s) = &scores {
            if s.nrows() != self.n || s.ncols() != rows {
                return Err(MeError::Inference {
                    msg: format!("block '{name}' scores have the wrong shape"),
                    rank: 0,
                    dim: self.dim,
                });
            }
        }
        let range = self.next_row..self.next_row + rows;
        self.next_row += rows;
        self.blocks.push(Block {
            name: name.to_string(),
            rows: range.clone(),
            scores,
            jacobian,
        });
        Ok(range)
    }

    pub fn a(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.next_row, self.dim);
        for b in &self.blocks {
            a.rows_mut(b.rows.start, b.rows.len()).copy_from(&b.jacobian);
        }
        a
    }

    pub fn b(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n, self.next_row);
        for b in &self.blocks {
            if let Some(sc) = &b.scores {
                s.columns_mut(b.rows.start, b.rows.len()).copy_from(sc);
            }
        }
        s.transpose() * &s / self.n as f64
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    /// Covariance of `sqrt(n)` times the estimation error of the full
    /// parameter vector.
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        if self.next_row != self.dim {
            return Err(MeError::Inference {
                msg: format!("system has {} rows for {} parameters", self.next_row, self.dim),
                rank: 0,
                dim: self.dim,
            });
        }
        let a = self.a();
        let ainv = linalg::inverse_or_rank(&a, "stacked Jacobian")?;
        let b = self.b();
        Ok(linalg::symmetrize(&(&ainv * b * ainv.transpose())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_mean_sandwich_is_variance() {
        let data = [1.0, 2.0, 4.0, 7.0];
        let mean = data.iter().sum::<f64>() / 4.0;
        let scores = DMatrix::from_fn(4, 1, |i, _| data[i] - mean);
        let mut sys = StackedSystem::new(4, 1);
        sys.push("mean", Some(scores), DMatrix::from_element(1, 1, -1.0)).unwrap();
        let v = sys.sandwich().unwrap();
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((v[(0, 0)] - var).abs() < 1e-12);
    }

    #[test]
    fn non_square_system_is_rejected() {
        let mut sys = StackedSystem::new(2, 2);
        sys.push("one", None, DMatrix::identity(1, 2)).unwrap();
        assert!(sys.sandwich().is_err());
    }
}
