//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MeError, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Numerical rank from singular values, relative tolerance `1e-10`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * max.max(f64::MIN_POSITIVE);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Inverse of a square matrix, `None` when it is numerically singular.
pub fn try_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let inv = m.clone().try_inverse()?;
    if inv.iter().all(|v| v.is_finite()) && inv.amax() * scale < 1e14 {
        Some(inv)
    } else {
        None
    }
}

/// Inverse or an [`MeError::Inference`] carrying the rank.
pub fn inverse_or_rank(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    try_inverse(m).ok_or_else(|| MeError::Inference {
        msg: format!("{what} is singular"),
        rank: rank(m),
        dim: m.nrows(),
    })
}

/// Eigen-clips a symmetric matrix to the PSD cone. Returns the clipped matrix
/// and the most negative eigenvalue that was removed (0 when none).
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let s = symmetrize(m);
    if s.nrows() == 0 {
        return (s, 0.0);
    }
    let eig = SymmetricEigen::new(s.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return (s, 0.0);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (symmetrize(&out), min)
}

/// Symmetric PSD square root. Eigenvalues below `1e-13` times the largest
/// absolute eigenvalue are treated as zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if s.nrows() == 0 {
        return s;
    }
    let eig = SymmetricEigen::new(s);
    let floor = null_floor(&eig.eigenvalues);
    let vals = eig.eigenvalues.map(|v| if v > floor { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn null_floor(vals: &DVector<f64>) -> f64 {
    let max = vals.iter().cloned().fold(0.0_f64, |a, v| a.max(v.abs()));
    1e-13 * max.max(1e-300)
}

/// Directional derivative of [`sym_sqrt`] at `m` along the symmetric
/// direction `dm` (Daleckii–Krein). Along null directions of `m` the square
/// root is not differentiable; those terms are set to zero.
pub fn sym_sqrt_derivative(m: &DMatrix<f64>, dm: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    let p = s.nrows();
    if p == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(s);
    let floor = null_floor(&eig.eigenvalues);
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v > floor { v.sqrt() } else { 0.0 })
        .collect();
    let q = &eig.eigenvectors;
    let mut inner = q.transpose() * symmetrize(dm) * q;
    for a in 0..p {
        for b in 0..p {
            let den = roots[a] + roots[b];
            inner[(a, b)] = if den > 0.0 { inner[(a, b)] / den } else { 0.0 };
        }
    }
    q * inner * q.transpose()
}

/// Length of the packed upper triangle of a `p x p` symmetric matrix.
pub fn sym_len(p: usize) -> usize {
    p * (p + 1) / 2
}

pub fn pack_sym(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    let p = m.nrows();
    for a in 0..p {
        for b in a..p {
            out.push(0.5 * (m[(a, b)] + m[(b, a)]));
        }
    }
}

pub fn unpack_sym(p: usize, src: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for a in 0..p {
        for b in a..p {
            m[(a, b)] = src[k];
            m[(b, a)] = src[k];
            k += 1;
        }
    }
    m
}

/// Row-major packing of a general matrix.
pub fn pack_full(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            out.push(m[(a, b)]);
        }
    }
}

pub fn unpack_full(r: usize, c: usize, src: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, &src[..r * c])
}

/// Central-difference step used by every numerical Jacobian in the crate.
pub fn fd_step(x: f64) -> f64 {
    1e-6_f64.max(1e-6 * x.abs())
}

/// Central-difference Jacobian of `f` at `x`, restricted to the listed
/// columns. Returns a `rows x cols.len()` matrix.
pub fn numeric_jacobian<F>(f: F, x: &[f64], cols: &[usize], rows: usize) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(rows, cols.len());
    let mut work = x.to_vec();
    for (c, &idx) in cols.iter().enumerate() {
        let h = fd_step(x[idx]);
        work[idx] = x[idx] + h;
        let up = f(&work);
        work[idx] = x[idx] - h;
        let down = f(&work);
        work[idx] = x[idx];
        for r in 0..rows {
            jac[(r, c)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    jac
}

/// Symmetric matrix with `e_a e_b^T + e_b e_a^T` (or `e_a e_a^T` on the
/// diagonal), the direction of one packed symmetric coordinate.
pub fn sym_unit(p: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    m[(a, b)] = 1.0;
    m[(b, a)] = 1.0;
    m
}

/// Solves `a x = b` via LU; `None` when singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}
