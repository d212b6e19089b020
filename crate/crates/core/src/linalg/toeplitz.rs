//! Symmetric block Toeplitz matrices `T[i][j] = R(j − i)`, `R(−d) = R(d)ᵀ`.
//!
//! Positivity is decided with the block Levinson (Whittle) recursion, which
//! produces the pivots of `T = B⁻¹·diag(D₀,…,D_{r−1})·B⁻ᵀ` in `O(r²n³)` time
//! and `O(rn²)` memory. `T ≻ 0` iff every pivot `D_k ≻ 0`; the recursion stops
//! at the first pivot that fails.
//!
//! A rank-`n` penalty `T − α·PᵀP` is handled through the same factorization:
//! with `C = P·Bᵀ` the penalized matrix is congruent to `D − α·CᵀC`, which is
//! positive definite iff `D ≻ 0` and `I − α·C·D⁻¹·Cᵀ ≻ 0`.

use nalgebra::Cholesky;

use super::{default_tolerance, Definiteness, Matrix};
use crate::par;

/// `α·PᵀP` with `P = (P₀, …, P_{r−1})`, each block `n×n`.
#[derive(Debug, Clone)]
pub struct LowRankPenalty {
    pub weight: f64,
    pub blocks: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BlockToeplitz {
    n: usize,
    r: usize,
    // R(0..r), each n×n column-major, concatenated
    data: Vec<f64>,
}

impl BlockToeplitz {
    /// `blocks[d] = R(d)`; `blocks[0]` is symmetrized.
    pub fn new(blocks: &[Matrix]) -> Self {
        assert!(!blocks.is_empty(), "block Toeplitz matrix needs at least one block");
        let n = blocks[0].nrows();
        let mut data = Vec::with_capacity(blocks.len() * n * n);
        for (d, b) in blocks.iter().enumerate() {
            assert_eq!(b.shape(), (n, n), "block {d} has the wrong shape");
            if d == 0 {
                data.extend_from_slice(super::symmetrize(b).as_slice());
            } else {
                data.extend_from_slice(b.as_slice());
            }
        }
        BlockToeplitz {
            n,
            r: blocks.len(),
            data,
        }
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.n * self.r
    }

    fn block(&self, d: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.data[d * nn..(d + 1) * nn]
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(self.dim(), self.dim());
        for i in 0..self.r {
            for j in 0..self.r {
                let (d, transpose) = if j >= i { (j - i, false) } else { (i - j, true) };
                let blk = self.block(d);
                for c in 0..n {
                    for rr in 0..n {
                        let v = if transpose { blk[rr * n + c] } else { blk[c * n + rr] };
                        out[(i * n + rr, j * n + c)] = v;
                    }
                }
            }
        }
        out
    }

    /// `y = (T − α·PᵀP)·x`.
    pub fn matvec(&self, x: &[f64], penalty: Option<&LowRankPenalty>) -> Vec<f64> {
        let n = self.n;
        assert_eq!(x.len(), self.dim());
        let rows: Vec<Vec<f64>> = par::map_range(self.r, |i| {
            let mut y = vec![0.0; n];
            for j in 0..self.r {
                let xj = &x[j * n..(j + 1) * n];
                if j >= i {
                    let b = self.block(j - i);
                    for c in 0..n {
                        let xc = xj[c];
                        for rr in 0..n {
                            y[rr] += b[c * n + rr] * xc;
                        }
                    }
                } else {
                    let b = self.block(i - j);
                    for rr in 0..n {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += b[rr * n + c] * xj[c];
                        }
                        y[rr] += acc;
                    }
                }
            }
            y
        });
        let mut y: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(p) = penalty {
            let mut px = vec![0.0; n];
            for (j, pj) in p.blocks.iter().enumerate() {
                let xj = &x[j * n..(j + 1) * n];
                for rr in 0..n {
                    for c in 0..n {
                        px[rr] += pj[(rr, c)] * xj[c];
                    }
                }
            }
            for (j, pj) in p.blocks.iter().enumerate() {
                for c in 0..n {
                    let mut acc = 0.0;
                    for rr in 0..n {
                        acc += pj[(rr, c)] * px[rr];
                    }
                    y[j * n + c] -= p.weight * acc;
                }
            }
        }
        y
    }

    /// Power-iteration estimate of the spectral norm.
    pub fn estimate_norm(&self, penalty: Option<&LowRankPenalty>, iterations: usize) -> f64 {
        let dim = self.dim();
        let mut x: Vec<f64> = (0..dim)
            .map(|i| 1.0 + 0.37 * ((i as f64) * 0.618).sin())
            .collect();
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            let y = self.matvec(&x, penalty);
            lambda = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y;
        }
        lambda
    }

    /// Whether `T − α·PᵀP − σ·I ≻ 0`.
    pub fn is_positive_definite_shifted(&self, sigma: f64, penalty: Option<&LowRankPenalty>) -> bool {
        levinson_pd(self, sigma, penalty)
    }

    /// Classification with the same band semantics as the dense
    /// [`super::classify_definiteness`]. The minimum eigenvalue is located by
    /// bisection on shifted factorizations to relative precision `1e-2`.
    pub fn classify(&self, penalty: Option<&LowRankPenalty>, tol: Option<f64>) -> Definiteness {
        let norm = self.estimate_norm(penalty, 20);
        let tol = tol.unwrap_or_else(|| default_tolerance(norm));
        let pd_at = |sigma: f64| self.is_positive_definite_shifted(sigma, penalty);
        let min_eig = if pd_at(tol) {
            // λ_min ≤ λ_min of the leading block.
            let mut s00 = Matrix::from_column_slice(self.n, self.n, self.block(0));
            if let Some(p) = penalty {
                s00 -= p.blocks[0].transpose() * &p.blocks[0] * p.weight;
            }
            let hi = super::symmetric_eigenvalues(&s00)
                .map(|e| e[0])
                .unwrap_or(norm)
                .max(tol);
            geometric_bisection(tol, hi, &pd_at)
        } else if pd_at(-tol) {
            let (mut lo, mut hi) = (-tol, tol);
            for _ in 0..12 {
                let mid = 0.5 * (lo + hi);
                if pd_at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        } else {
            // |λ_min| ∈ (tol, ‖T‖]; σ ↦ T + σI is PD once σ exceeds |λ_min|.
            let mut hi = (norm * 1.05).max(2.0 * tol);
            // the power estimate can fall short of |λ_min|
            while !pd_at(-hi) && hi.is_finite() {
                hi *= 2.0;
            }
            -geometric_bisection(tol, hi, |s| !pd_at(-s))
        };
        Definiteness::from_min_eigenvalue(min_eig, tol)
    }
}

/// Largest `s ∈ [lo, hi]` (geometrically) with `holds(s)`, assuming
/// `holds(lo)` and monotonicity.
fn geometric_bisection(mut lo: f64, mut hi: f64, holds: impl Fn(f64) -> bool) -> f64 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..40 {
        if hi / lo < 1.01 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// Small dense kernels on column-major n×n blocks.

#[inline]
fn mul_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    // c += a·b
    for j in 0..n {
        for k in 0..n {
            let bkj = b[j * n + k];
            if bkj == 0.0 {
                continue;
            }
            for i in 0..n {
                c[j * n + i] += a[k * n + i] * bkj;
            }
        }
    }
}

#[inline]
fn mul_acc_bt(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    // c += a·bᵀ
    for j in 0..n {
        for k in 0..n {
            let bjk = b[k * n + j];
            if bjk == 0.0 {
                continue;
            }
            for i in 0..n {
                c[j * n + i] += a[k * n + i] * bjk;
            }
        }
    }
}

fn to_matrix(n: usize, s: &[f64]) -> Matrix {
    Matrix::from_column_slice(n, n, s)
}

fn levinson_pd(t: &BlockToeplitz, sigma: f64, penalty: Option<&LowRankPenalty>) -> bool {
    let n = t.n;
    let nn = n * n;
    let r = t.r;
    let eye = Matrix::identity(n, n);

    let mut r0 = to_matrix(n, t.block(0));
    r0 -= &eye * sigma;
    let r0 = super::symmetrize(&r0);

    let pd_pivot = |m: &Matrix| Cholesky::new(super::symmetrize(m));

    let Some(chol0) = pd_pivot(&r0) else {
        return false;
    };

    // a_k (forward) and b_k (backward) predictor coefficients, block i at i*nn.
    let mut a: Vec<f64> = eye.as_slice().to_vec();
    let mut b: Vec<f64> = eye.as_slice().to_vec();
    let mut pf = r0.clone();
    let mut pb = r0.clone();
    let mut pb_chol = chol0;

    // Accumulated C·D⁻¹·Cᵀ for the penalty test.
    let mut q = Matrix::zeros(n, n);
    let c_block = |b: &[f64], k: usize, pb_chol: &Cholesky<f64, nalgebra::Dyn>, q: &mut Matrix| {
        if let Some(p) = penalty {
            let blocks: Vec<&[f64]> = p.blocks[..=k].iter().map(|m| m.as_slice()).collect();
            let c = par::sum_vectors(k + 1, nn, |i, acc| mul_acc_bt(acc, blocks[i], &b[i * nn..(i + 1) * nn], n));
            let c = to_matrix(n, &c);
            let dinv_ct = pb_chol.solve(&c.transpose());
            *q += &c * dinv_ct;
        }
    };
    c_block(&b, 0, &pb_chol, &mut q);

    for k in 0..r.saturating_sub(1) {
        // Δ = Σ a_i R(k+1−i), ∇ = Σ b_i R(i+1)ᵀ
        let delta = par::sum_vectors(k + 1, nn, |i, acc| {
            mul_acc(acc, &a[i * nn..(i + 1) * nn], t.block(k + 1 - i), n)
        });
        let nabla = par::sum_vectors(k + 1, nn, |i, acc| {
            mul_acc_bt(acc, &b[i * nn..(i + 1) * nn], t.block(i + 1), n)
        });
        let delta = to_matrix(n, &delta);
        let nabla = to_matrix(n, &nabla);

        // Γf = −Δ·Pb⁻¹, Γb = −∇·Pf⁻¹
        let gamma_f = -(pb_chol.solve(&delta.transpose())).transpose();
        let gamma_b = match pf.clone().lu().solve(&nabla.transpose()) {
            Some(s) => -s.transpose(),
            None => return false,
        };

        let gf = gamma_f.as_slice().to_vec();
        let gb = gamma_b.as_slice().to_vec();
        let old_a = &a;
        let old_b = &b;
        let new_a = par::map_blocks(k + 2, nn, |i, out| {
            if i <= k {
                out.copy_from_slice(&old_a[i * nn..(i + 1) * nn]);
            }
            if i >= 1 {
                mul_acc(out, &gf, &old_b[(i - 1) * nn..i * nn], n);
            }
        });
        let new_b = par::map_blocks(k + 2, nn, |i, out| {
            if i >= 1 {
                out.copy_from_slice(&old_b[(i - 1) * nn..i * nn]);
            }
            if i <= k {
                mul_acc(out, &gb, &old_a[i * nn..(i + 1) * nn], n);
            }
        });

        pf = super::symmetrize(&(&pf + &gamma_f * &nabla));
        pb = super::symmetrize(&(&pb + &gamma_b * &delta));
        a = new_a;
        b = new_b;

        match pd_pivot(&pb) {
            Some(c) => pb_chol = c,
            None => return false,
        }
        c_block(&b, k + 1, &pb_chol, &mut q);
    }

    match penalty {
        None => true,
        Some(p) => {
            let s = &eye - &q * p.weight;
            Cholesky::new(super::symmetrize(&s)).is_some()
        }
    }
}
