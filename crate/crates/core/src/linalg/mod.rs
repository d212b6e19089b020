//! Dense real matrix kernels shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>` (column-major storage). `vec` stacks
//! columns, so it is a plain reinterpretation of the storage.

mod toeplitz;

pub use toeplitz::{BlockToeplitz, LowRankPenalty};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative band used when no explicit tolerance is supplied.
pub const DEFAULT_DEFINITENESS_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is singular (pivot ratio {pivot_ratio:e})")]
    Singular { pivot_ratio: f64 },
    #[error("matrix exponential out of floating-point range")]
    Range,
    #[error("non-finite entry in input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DefinitenessClass {
    PositiveDefinite,
    PositiveSemidefiniteSingular,
    NotPositiveSemidefinite,
}

/// Outcome of a positivity test with the floating-point band that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Definiteness {
    pub class: DefinitenessClass,
    pub min_eigenvalue: f64,
    pub tolerance_used: f64,
}

impl Definiteness {
    pub fn from_min_eigenvalue(min_eigenvalue: f64, tol: f64) -> Self {
        let class = if min_eigenvalue > tol {
            DefinitenessClass::PositiveDefinite
        } else if min_eigenvalue < -tol {
            DefinitenessClass::NotPositiveSemidefinite
        } else {
            DefinitenessClass::PositiveSemidefiniteSingular
        };
        Definiteness {
            class,
            min_eigenvalue,
            tolerance_used: tol,
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.class == DefinitenessClass::PositiveDefinite
    }
}

pub fn ensure_finite(a: &Matrix) -> Result<(), LinalgError> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

fn ensure_square(a: &Matrix) -> Result<(), LinalgError> {
    if a.is_square() {
        Ok(())
    } else {
        Err(LinalgError::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(a: &Matrix) -> Matrix {
    Matrix::from_column_slice(a.len(), 1, a.as_slice())
}

pub fn unvec(v: &Matrix, rows: usize, cols: usize) -> Result<Matrix, LinalgError> {
    if v.ncols() != 1 || v.nrows() != rows * cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "cannot reshape {}x{} into {rows}x{cols}",
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn identity(n: usize) -> Matrix {
    Matrix::identity(n, n)
}

/// Matrix exponential (scaling and squaring with a Padé approximant).
pub fn expm(a: &Matrix) -> Result<Matrix, LinalgError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let e = a.exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(LinalgError::Range)
    }
}

/// Ascending eigenvalues of the symmetric part of `a`.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>, LinalgError> {
    ensure_square(a)?;
    let sym = symmetrize(a);
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn default_tolerance(norm: f64) -> f64 {
    DEFAULT_DEFINITENESS_REL_TOL * norm.max(1.0)
}

/// Classifies `(a + aᵀ)/2`. With `tol = None` the band is `1e-9·max(1, ‖a‖)`.
pub fn classify_definiteness(a: &Matrix, tol: Option<f64>) -> Result<Definiteness, LinalgError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if a.nrows() == 0 {
        return Err(LinalgError::DimensionMismatch("empty matrix".into()));
    }
    let ev = symmetric_eigenvalues(a)?;
    let min = ev[0];
    let norm = ev.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let tol = tol.unwrap_or_else(|| default_tolerance(norm));
    Ok(Definiteness::from_min_eigenvalue(min, tol))
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest and largest singular values of a square matrix.
pub fn singular_value_range(a: &Matrix) -> (f64, f64) {
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let sv = a.singular_values();
    (sv.min(), sv.max())
}

/// Solves `a·x = b` with partial pivoting. Fails with [`LinalgError::Singular`]
/// when the smallest pivot falls below `n·ε` relative to the largest.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    ensure_square(a)?;
    if a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "lhs has {} rows, rhs has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    ensure_finite(a)?;
    ensure_finite(b)?;
    let lu = a.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max_pivot = diag.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let min_pivot = diag.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let ratio = if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 };
    if ratio <= a.nrows() as f64 * f64::EPSILON {
        return Err(LinalgError::Singular { pivot_ratio: ratio });
    }
    lu.solve(b).ok_or(LinalgError::Singular { pivot_ratio: ratio })
}
