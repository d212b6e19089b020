//! Rightmost characteristic roots by Chebyshev collocation of the
//! infinitesimal generator on `[−H, 0]`, refined by Newton's method on
//! `det(sI − Σⱼ Aⱼe^{−shⱼ})`.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::system::TimeDelaySystem;

type C64 = Complex<f64>;

pub const DEFAULT_N: usize = 64;
pub const MAX_N: usize = 512;
/// Real parts closer to zero than this are not decided.
pub const STABILITY_MARGIN: f64 = 1e-8;
/// Successive discretizations must agree on the rightmost root to this.
pub const AGREEMENT_TOL: f64 = 1e-8;
const DIVERGENCE_TOL: f64 = 1e-6;
const CANDIDATES: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("rightmost root did not settle up to N = {n} (last change {change:e})")]
    NoConvergence { n: usize, change: f64 },
    #[error("rightmost root real part {real:e} is within the undecided band")]
    Undecided { real: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumEstimate {
    /// `[re, im]` pairs, real part descending.
    #[serde(serialize_with = "as_pairs")]
    pub roots: Vec<C64>,
    pub n: usize,
    pub converged: bool,
    /// `|det Δ(s)|` at the rightmost root.
    pub residual: f64,
}

fn as_pairs<S: serde::Serializer>(roots: &[C64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(roots.len()))?;
    for r in roots {
        seq.serialize_element(&[r.re, r.im])?;
    }
    seq.end()
}

impl SpectrumEstimate {
    pub fn rightmost(&self) -> Option<C64> {
        self.roots.first().copied()
    }
}

fn chebyshev(n: usize) -> (Vec<f64>, Matrix) {
    let x: Vec<f64> = (0..=n).map(|j| (PI * j as f64 / n as f64).cos()).collect();
    let c = |j: usize| if j == 0 || j == n { 2.0 } else { 1.0 };
    let mut d = Matrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                d[(i, j)] = c(i) / c(j) * sign / (x[i] - x[j]);
            }
        }
        let row: f64 = (0..=n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -row;
    }
    (x, d)
}

/// Barycentric interpolation weights at `t`.
fn interp_weights(x: &[f64], t: f64) -> Vec<f64> {
    let n = x.len() - 1;
    if let Some(k) = x.iter().position(|&xi| (xi - t).abs() < 1e-15) {
        let mut e = vec![0.0; n + 1];
        e[k] = 1.0;
        return e;
    }
    let w: Vec<f64> = (0..=n)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n { 0.5 * s } else { s }
        })
        .collect();
    let terms: Vec<f64> = (0..=n).map(|j| w[j] / (t - x[j])).collect();
    let total: f64 = terms.iter().sum();
    terms.into_iter().map(|v| v / total).collect()
}

fn generator(terms: &[(f64, &Matrix)], h: f64, n_pts: usize) -> Matrix {
    let n = terms[0].1.nrows();
    let (x, d) = chebyshev(n_pts);
    let dim = n * (n_pts + 1);
    let mut g = Matrix::zeros(dim, dim);
    for &(hj, a) in terms {
        let w = interp_weights(&x, 1.0 - 2.0 * hj / h);
        for (k, wk) in w.iter().enumerate() {
            if *wk != 0.0 {
                let mut blk = g.view_mut((0, k * n), (n, n));
                blk += a * *wk;
            }
        }
    }
    for i in 1..=n_pts {
        for k in 0..=n_pts {
            let v = 2.0 / h * d[(i, k)];
            for c in 0..n {
                g[(i * n + c, k * n + c)] = v;
            }
        }
    }
    g
}

fn delta(terms: &[(f64, &Matrix)], s: C64) -> (DMatrix<C64>, DMatrix<C64>) {
    let n = terms[0].1.nrows();
    let mut d = DMatrix::<C64>::identity(n, n) * s;
    let mut dp = DMatrix::<C64>::identity(n, n);
    for &(hj, a) in terms {
        let e = (-s * hj).exp();
        for i in 0..n {
            for j in 0..n {
                let v = e * a[(i, j)];
                d[(i, j)] -= v;
                dp[(i, j)] += v * hj;
            }
        }
    }
    (d, dp)
}

/// `|det(sI − Σⱼ Aⱼe^{−shⱼ})|`.
pub fn characteristic_residual(sys: &TimeDelaySystem, s: C64) -> f64 {
    let terms = raw_terms(sys);
    delta(&terms, s).0.determinant().norm()
}

fn newton(terms: &[(f64, &Matrix)], s0: C64) -> Option<C64> {
    let mut s = s0;
    for _ in 0..60 {
        let (d, dp) = delta(terms, s);
        let lu = d.lu();
        let x = lu.solve(&dp)?;
        let tr = x.trace();
        if tr.norm() == 0.0 || !tr.re.is_finite() {
            return None;
        }
        let step = tr.inv();
        s -= step;
        if step.norm() <= 1e-14 * (1.0 + s.norm()) {
            return Some(s);
        }
    }
    None
}

fn raw_terms(sys: &TimeDelaySystem) -> Vec<(f64, &Matrix)> {
    sys.terms().iter().map(|t| (t.delay, &t.a)).collect()
}

fn sort_dedup(mut roots: Vec<C64>) -> Vec<C64> {
    roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let mut out: Vec<C64> = Vec::with_capacity(roots.len());
    for r in roots {
        if !out.iter().any(|q| (q - r).norm() <= 1e-8 * (1.0 + r.norm())) {
            out.push(r);
        }
    }
    out
}

fn estimate_terms(terms: &[(f64, &Matrix)], n_pts: usize, count: usize) -> SpectrumEstimate {
    let h = terms.iter().map(|t| t.0).fold(0.0, f64::max);
    let active: Vec<(f64, &Matrix)> = terms.iter().filter(|t| t.1.amax() > 0.0).copied().collect();
    let delayed = active.iter().any(|t| t.0 > 0.0);
    if h == 0.0 || !delayed {
        let n = terms[0].1.nrows();
        let sum = active.iter().fold(Matrix::zeros(n, n), |acc, t| acc + t.1);
        let mut roots = sort_dedup(sum.complex_eigenvalues().iter().copied().collect());
        roots.truncate(count.max(1));
        return SpectrumEstimate {
            roots,
            n: 0,
            converged: true,
            residual: 0.0,
        };
    }
    let g = generator(terms, h, n_pts);
    let mut raw: Vec<C64> = g.complex_eigenvalues().iter().copied().collect();
    raw.sort_by(|a, b| b.re.total_cmp(&a.re));
    raw.truncate(CANDIDATES.max(count));
    let refined: Vec<C64> = raw
        .iter()
        .map(|&s0| match newton(terms, s0) {
            Some(s) if (s - s0).norm() <= 0.5 * (1.0 + s0.norm()) => s,
            _ => s0,
        })
        .collect();
    let mut roots = sort_dedup(refined);
    roots.truncate(count.max(1));
    let residual = roots
        .first()
        .map(|&s| delta(terms, s).0.determinant().norm())
        .unwrap_or(0.0);
    SpectrumEstimate {
        roots,
        n: n_pts,
        converged: false,
        residual,
    }
}

/// Rightmost `count` roots from an `n_pts`-point collocation, without the
/// convergence check.
pub fn rightmost_roots(sys: &TimeDelaySystem, n_pts: usize, count: usize) -> SpectrumEstimate {
    estimate_terms(&raw_terms(sys), n_pts.max(4), count)
}

/// Doubles `N` from [`DEFAULT_N`] until two successive estimates agree on the
/// rightmost root.
pub fn converged_spectrum(sys: &TimeDelaySystem, count: usize) -> Result<SpectrumEstimate, OracleError> {
    let terms = raw_terms(sys);
    let mut prev = estimate_terms(&terms, DEFAULT_N, count);
    if prev.n == 0 {
        return Ok(prev);
    }
    let mut n = DEFAULT_N;
    let mut change = f64::INFINITY;
    while n < MAX_N {
        n *= 2;
        let next = estimate_terms(&terms, n, count);
        change = match (prev.rightmost(), next.rightmost()) {
            (Some(a), Some(b)) => (a.re - b.re).abs().max((a.im.abs() - b.im.abs()).abs()),
            _ => f64::INFINITY,
        };
        if change <= AGREEMENT_TOL {
            return Ok(SpectrumEstimate {
                converged: true,
                ..next
            });
        }
        prev = next;
    }
    if change <= DIVERGENCE_TOL {
        Ok(prev)
    } else {
        Err(OracleError::NoConvergence { n, change })
    }
}

/// Whether the rightmost root lies left of `−1e−8`.
pub fn is_stable_oracle(sys: &TimeDelaySystem) -> Result<bool, OracleError> {
    let est = converged_spectrum(sys, 1)?;
    let re = est.rightmost().map(|s| s.re).unwrap_or(f64::NEG_INFINITY);
    if re.abs() <= STABILITY_MARGIN {
        return Err(OracleError::Undecided { real: re });
    }
    Ok(re < 0.0)
}
