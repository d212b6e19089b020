//! The delay Lyapunov matrix `U(τ)`.
//!
//! For commensurate delays `hⱼ = kⱼh`, `H = K·h`, the pieces
//! `Zⱼ(s) = U(jh + s)` and `Yⱼ(s) = Zⱼ(h − s)ᵀ`, `s ∈ [0, h]`, satisfy a linear
//! constant-coefficient ODE `Ẋ = ΛX` in the stacked vector
//! `X = (vec Z₀ … vec Z_{K−1}, vec Y₀ … vec Y_{K−1})`. Continuity, symmetry at
//! zero and the algebraic condition give a square linear system for `X(0)`;
//! it is singular exactly when the Lyapunov condition fails.

use std::sync::OnceLock;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, kron, Matrix, Vector};
use crate::system::{SystemError, TimeDelaySystem, DEFAULT_COMMENSURATION_TOL};

/// Boundary systems are declared singular below this relative singular value.
pub const CONDITION_REL_TOL: f64 = 1e-10;

/// Largest stacked state `2·K·n²` accepted.
pub const MAX_STACK: usize = 1024;

/// Hermite table resolution per basic-delay segment.
const TABLE_STEPS: usize = 2048;
const TABLE_ANCHOR: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapmatError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("delays are not commensurate; only commensurate delays are supported")]
    Incommensurate,
    #[error("Lyapunov condition fails: boundary system is singular (relative smallest singular value {sigma_rel:e})")]
    LyapunovConditionFails { sigma_rel: f64 },
    #[error("stacked boundary system of size {size} exceeds the limit {MAX_STACK}")]
    TooLarge { size: usize },
    #[error("matrix exponential overflow")]
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovConditionStatus {
    pub holds: bool,
    /// Smallest singular value of the boundary matrix divided by the largest.
    pub sigma_min_rel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropertyResiduals {
    pub dynamic: f64,
    pub symmetry: f64,
    pub algebraic: f64,
    pub continuity: f64,
}

impl PropertyResiduals {
    pub fn max(&self) -> f64 {
        self.dynamic.max(self.symmetry).max(self.algebraic).max(self.continuity)
    }
}

#[derive(Debug)]
struct Table {
    step: f64,
    // per global node on [0, H]: vec U and vec U', segment-major; node count K·TABLE_STEPS + 1
    values: Vec<f64>,
    derivs_right: Vec<f64>,
    derivs_left: Vec<f64>,
}

#[derive(Debug)]
pub struct LyapunovMatrix {
    n: usize,
    basic_delay: f64,
    segments: usize,
    terms: Vec<(usize, Matrix)>,
    w: Matrix,
    lambda: Matrix,
    x0: Vector,
    condition: LyapunovConditionStatus,
    table: OnceLock<Table>,
}

struct Layout {
    n2: usize,
    segments: usize,
}

impl Layout {
    fn z(&self, j: usize) -> usize {
        j * self.n2
    }
    fn y(&self, i: usize) -> usize {
        (self.segments + i) * self.n2
    }
    fn size(&self) -> usize {
        2 * self.segments * self.n2
    }
}

fn add_block(m: &mut Matrix, row: usize, col: usize, b: &Matrix, sign: f64) {
    let mut v = m.view_mut((row, col), (b.nrows(), b.ncols()));
    v += b * sign;
}

fn generator(n: usize, segments: usize, terms: &[(usize, Matrix)]) -> Matrix {
    let lay = Layout { n2: n * n, segments };
    let eye = Matrix::identity(n, n);
    let mut l = Matrix::zeros(lay.size(), lay.size());
    for (k, a) in terms {
        let right = kron(&a.transpose(), &eye);
        let left = kron(&eye, &a.transpose());
        for j in 0..segments {
            let col = if j >= *k { lay.z(j - k) } else { lay.y(k - j - 1) };
            add_block(&mut l, lay.z(j), col, &right, 1.0);
            let col = if j >= *k { lay.y(j - k) } else { lay.z(k - j - 1) };
            add_block(&mut l, lay.y(j), col, &left, -1.0);
        }
    }
    l
}

/// Boundary matrix and right-hand side for `X(0)`.
fn boundary(
    n: usize,
    segments: usize,
    terms: &[(usize, Matrix)],
    w: &Matrix,
    e: &Matrix,
) -> (Matrix, Vector) {
    let lay = Layout { n2: n * n, segments };
    let n2 = lay.n2;
    let size = lay.size();
    let eye = Matrix::identity(n, n);
    let eye2 = Matrix::identity(n2, n2);
    let mut b = Matrix::zeros(size, size);
    let e_rows = |blk: usize| e.rows(blk, n2).clone_owned();
    let mut row = 0;
    for j in 0..segments - 1 {
        // Z_j(h) = Z_{j+1}(0)
        b.rows_mut(row, n2).copy_from(&e_rows(lay.z(j)));
        add_block(&mut b, row, lay.z(j + 1), &eye2, -1.0);
        row += n2;
        // Y_{j+1}(h) = Y_j(0)
        b.rows_mut(row, n2).copy_from(&e_rows(lay.y(j + 1)));
        add_block(&mut b, row, lay.y(j), &eye2, -1.0);
        row += n2;
    }
    // Z_0(0) = Y_0(h)
    add_block(&mut b, row, lay.z(0), &eye2, 1.0);
    let mut v = b.rows_mut(row, n2);
    v -= e_rows(lay.y(0));
    row += n2;
    // Σ U(−h_l)A_l + A_lᵀU(h_l) = −W
    for (k, a) in terms {
        let right = kron(&a.transpose(), &eye);
        let left = kron(&eye, &a.transpose());
        if *k == 0 {
            add_block(&mut b, row, lay.z(0), &(&right + &left), 1.0);
        } else if *k < segments {
            add_block(&mut b, row, lay.y(k - 1), &right, 1.0);
            add_block(&mut b, row, lay.z(*k), &left, 1.0);
        } else {
            add_block(&mut b, row, lay.y(segments - 1), &right, 1.0);
            let mut v = b.rows_mut(row, n2);
            v += &left * e_rows(lay.z(segments - 1));
        }
    }
    let mut rhs = Vector::zeros(size);
    rhs.rows_mut(row, n2).copy_from(&(-linalg::vec(w).column(0).clone_owned()));
    (b, rhs)
}

fn condition_status(b: &Matrix) -> LyapunovConditionStatus {
    let (smin, smax) = linalg::singular_value_range(b);
    let rel = if smax > 0.0 { smin / smax } else { 0.0 };
    LyapunovConditionStatus {
        holds: rel.is_finite() && rel >= CONDITION_REL_TOL,
        sigma_min_rel: rel,
    }
}

fn prepare(sys: &TimeDelaySystem) -> Result<(f64, usize, Vec<(usize, Matrix)>), LyapmatError> {
    sys.validate()?;
    let comm = sys
        .commensurate(DEFAULT_COMMENSURATION_TOL)
        .ok_or(LyapmatError::Incommensurate)?;
    let segments = comm.max_multiplier();
    let size = 2 * segments * sys.dim() * sys.dim();
    if size > MAX_STACK {
        return Err(LyapmatError::TooLarge { size });
    }
    let terms = sys
        .terms()
        .iter()
        .zip(&comm.multipliers)
        .map(|(t, &k)| (k, t.a.clone()))
        .collect();
    Ok((comm.basic_delay, segments, terms))
}

/// Whether the boundary system is nonsingular, with its relative smallest
/// singular value.
pub fn check_lyapunov_condition(sys: &TimeDelaySystem) -> Result<LyapunovConditionStatus, LyapmatError> {
    let (h, segments, terms) = prepare(sys)?;
    let n = sys.dim();
    let l = generator(n, segments, &terms);
    let e = linalg::expm(&(&l * h)).map_err(|_| LyapmatError::Range)?;
    let (b, _) = boundary(n, segments, &terms, sys.weight(), &e);
    Ok(condition_status(&b))
}

impl LyapunovMatrix {
    /// Single-delay formula when there is one delay, the boundary-value
    /// construction otherwise.
    pub fn build(sys: &TimeDelaySystem) -> Result<Self, LyapmatError> {
        if sys.delay_count() == 1 {
            Self::build_single_delay(sys)
        } else {
            Self::build_commensurate(sys)
        }
    }

    /// `U(τ) = vec⁻¹([I 0]·e^{Lτ}·M⁻¹·(0, −vec W))` on `[0, H]`.
    pub fn build_single_delay(sys: &TimeDelaySystem) -> Result<Self, LyapmatError> {
        sys.validate()?;
        assert_eq!(sys.delay_count(), 1, "single-delay formula needs exactly one delay");
        let n = sys.dim();
        let n2 = n * n;
        let h = sys.max_delay();
        let a0 = &sys.terms()[0].a;
        let a1 = &sys.terms()[1].a;
        let eye = Matrix::identity(n, n);
        let eye2 = Matrix::identity(n2, n2);
        let (a0t, a1t) = (a0.transpose(), a1.transpose());

        let mut l = Matrix::zeros(2 * n2, 2 * n2);
        l.view_mut((0, 0), (n2, n2)).copy_from(&kron(&a0t, &eye));
        l.view_mut((0, n2), (n2, n2)).copy_from(&kron(&a1t, &eye));
        l.view_mut((n2, 0), (n2, n2)).copy_from(&-kron(&eye, &a1t));
        l.view_mut((n2, n2), (n2, n2)).copy_from(&-kron(&eye, &a0t));

        let elh = linalg::expm(&(&l * h)).map_err(|_| LyapmatError::Range)?;
        let mut m1 = Matrix::zeros(2 * n2, 2 * n2);
        m1.view_mut((0, 0), (n2, n2)).copy_from(&eye2);
        m1.view_mut((n2, 0), (n2, n2))
            .copy_from(&(kron(&a0t, &eye) + kron(&eye, &a0t)));
        m1.view_mut((n2, n2), (n2, n2)).copy_from(&kron(&a1t, &eye));
        let mut m2 = Matrix::zeros(2 * n2, 2 * n2);
        m2.view_mut((0, n2), (n2, n2)).copy_from(&-&eye2);
        m2.view_mut((n2, 0), (n2, n2)).copy_from(&kron(&eye, &a1t));
        let m = m1 + m2 * elh;

        let condition = condition_status(&m);
        if !condition.holds {
            return Err(LyapmatError::LyapunovConditionFails {
                sigma_rel: condition.sigma_min_rel,
            });
        }
        let mut rhs = Matrix::zeros(2 * n2, 1);
        rhs.view_mut((n2, 0), (n2, 1)).copy_from(&-linalg::vec(sys.weight()));
        let x0 = linalg::solve_linear(&m, &rhs).map_err(|_| LyapmatError::LyapunovConditionFails {
            sigma_rel: condition.sigma_min_rel,
        })?;
        Ok(LyapunovMatrix {
            n,
            basic_delay: h,
            segments: 1,
            terms: vec![(0, a0.clone()), (1, a1.clone())],
            w: sys.weight().clone(),
            lambda: l,
            x0: x0.column(0).clone_owned(),
            condition,
            table: OnceLock::new(),
        })
    }

    /// Boundary-value construction for commensurate delays.
    pub fn build_commensurate(sys: &TimeDelaySystem) -> Result<Self, LyapmatError> {
        let (h, segments, terms) = prepare(sys)?;
        let n = sys.dim();
        let lambda = generator(n, segments, &terms);
        let e = linalg::expm(&(&lambda * h)).map_err(|_| LyapmatError::Range)?;
        let (b, rhs) = boundary(n, segments, &terms, sys.weight(), &e);
        let condition = condition_status(&b);
        if !condition.holds {
            return Err(LyapmatError::LyapunovConditionFails {
                sigma_rel: condition.sigma_min_rel,
            });
        }
        let x0 = linalg::solve_linear(&b, &Matrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))
            .map_err(|_| LyapmatError::LyapunovConditionFails {
                sigma_rel: condition.sigma_min_rel,
            })?;
        Ok(LyapunovMatrix {
            n,
            basic_delay: h,
            segments,
            terms,
            w: sys.weight().clone(),
            lambda,
            x0: x0.column(0).clone_owned(),
            condition,
            table: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn max_delay(&self) -> f64 {
        self.basic_delay * self.segments as f64
    }

    pub fn basic_delay(&self) -> f64 {
        self.basic_delay
    }

    pub fn condition(&self) -> LyapunovConditionStatus {
        self.condition
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    fn locate(&self, tau: f64) -> (usize, f64) {
        let j = ((tau / self.basic_delay).floor() as usize).min(self.segments - 1);
        (j, tau - j as f64 * self.basic_delay)
    }

    fn stack_at(&self, s: f64) -> Vector {
        if s == 0.0 {
            return self.x0.clone();
        }
        let e = (&self.lambda * s).exp();
        e * &self.x0
    }

    fn segment_block(&self, x: &Vector, j: usize) -> Matrix {
        let n2 = self.n * self.n;
        Matrix::from_column_slice(self.n, self.n, &x.as_slice()[j * n2..(j + 1) * n2])
    }

    /// `U(τ)` for `τ ∈ [−H, H]`; negative arguments return the transpose of
    /// the positive one.
    pub fn eval(&self, tau: f64) -> Matrix {
        if tau < 0.0 {
            return self.eval(-tau).transpose();
        }
        self.check_range(tau);
        let (j, s) = self.locate(tau);
        self.segment_block(&self.stack_at(s), j)
    }

    /// Right derivative `U'(τ⁺)` for `τ ∈ [0, H)`, or the left one at `H`.
    pub fn derivative(&self, tau: f64) -> Matrix {
        self.check_range(tau);
        let (j, s) = self.locate(tau);
        let dx = &self.lambda * self.stack_at(s);
        self.segment_block(&dx, j)
    }

    fn check_range(&self, tau: f64) {
        let hmax = self.max_delay();
        assert!(
            tau.abs() <= hmax * (1.0 + 1e-12),
            "U evaluated at {tau} outside [-{hmax}, {hmax}]"
        );
    }

    fn table(&self) -> &Table {
        self.table.get_or_init(|| {
            let n2 = self.n * self.n;
            let h = self.basic_delay;
            let step = h / TABLE_STEPS as f64;
            let nodes = self.segments * TABLE_STEPS + 1;
            let mut values = vec![0.0; nodes * n2];
            let mut derivs_right = vec![0.0; nodes * n2];
            let mut derivs_left = vec![0.0; nodes * n2];
            let prop = (&self.lambda * step).exp();
            let mut x = self.x0.clone();
            for i in 0..=TABLE_STEPS {
                if i % TABLE_ANCHOR == 0 && i > 0 {
                    x = self.stack_at(i as f64 * step);
                }
                let dx = &self.lambda * &x;
                for j in 0..self.segments {
                    let g = j * TABLE_STEPS + i;
                    let src = &x.as_slice()[j * n2..(j + 1) * n2];
                    let dsrc = &dx.as_slice()[j * n2..(j + 1) * n2];
                    if i < TABLE_STEPS || j == self.segments - 1 {
                        values[g * n2..(g + 1) * n2].copy_from_slice(src);
                    }
                    if i < TABLE_STEPS {
                        derivs_right[g * n2..(g + 1) * n2].copy_from_slice(dsrc);
                    }
                    if i > 0 {
                        derivs_left[g * n2..(g + 1) * n2].copy_from_slice(dsrc);
                    }
                }
                if i < TABLE_STEPS {
                    x = &prop * x;
                }
            }
            Table {
                step,
                values,
                derivs_right,
                derivs_left,
            }
        })
    }

    /// Interpolated `U(τ)` written column-major into `out`; agrees with
    /// [`Self::eval`] to roughly machine precision and is much cheaper.
    pub fn eval_fast_into(&self, tau: f64, out: &mut [f64]) {
        let n = self.n;
        let n2 = n * n;
        let t = self.table();
        let a = tau.abs();
        let nodes = t.values.len() / n2;
        let x = a / t.step;
        let k = (x.floor() as usize).min(nodes - 2);
        let th = x - k as f64;
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = (th3 - 2.0 * th2 + th) * t.step;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = (th3 - th2) * t.step;
        let p0 = &t.values[k * n2..(k + 1) * n2];
        let p1 = &t.values[(k + 1) * n2..(k + 2) * n2];
        let m0 = &t.derivs_right[k * n2..(k + 1) * n2];
        let m1 = &t.derivs_left[(k + 1) * n2..(k + 2) * n2];
        let transpose = tau < 0.0;
        for c in 0..n {
            for r in 0..n {
                let i = c * n + r;
                let v = h00 * p0[i] + h10 * m0[i] + h01 * p1[i] + h11 * m1[i];
                if transpose {
                    out[r * n + c] = v;
                } else {
                    out[i] = v;
                }
            }
        }
    }

    pub fn eval_fast(&self, tau: f64) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        self.eval_fast_into(tau, m.as_mut_slice());
        m
    }

    /// `sup ‖U(τ)‖` over `samples` equidistant points of `[0, H]`.
    pub fn sup_norm(&self, samples: usize) -> f64 {
        let hmax = self.max_delay();
        (0..samples.max(2))
            .map(|i| {
                let tau = hmax * i as f64 / (samples.max(2) - 1) as f64;
                linalg::spectral_norm(&self.eval_fast(tau))
            })
            .fold(0.0, f64::max)
    }

    /// Residuals of the defining properties on `grid_points` equidistant
    /// arguments of `[0, H]`.
    pub fn check_properties(&self, grid_points: usize) -> PropertyResiduals {
        let hmax = self.max_delay();
        let h = self.basic_delay;
        let delays: Vec<(f64, &Matrix)> = self
            .terms
            .iter()
            .map(|(k, a)| (*k as f64 * h, a))
            .collect();
        let grid: Vec<f64> = (0..grid_points.max(1))
            .map(|i| {
                if grid_points <= 1 {
                    0.0
                } else {
                    hmax * i as f64 / (grid_points - 1) as f64
                }
            })
            .collect();

        let mut dynamic: f64 = 0.0;
        let mut symmetry: f64 = 0.0;
        for &tau in &grid {
            let (d, s) = self.pointwise_residuals(tau);
            dynamic = dynamic.max(d);
            symmetry = symmetry.max(s);
        }

        let mut alg = self.w.clone();
        for &(hl, a) in &delays {
            alg += self.eval(-hl) * a + a.transpose() * self.eval(hl);
        }
        let algebraic = linalg::spectral_norm(&alg);

        let end = self.stack_at(h);
        let mut continuity: f64 = 0.0;
        for j in 0..self.segments.saturating_sub(1) {
            let d = self.segment_block(&end, j) - self.segment_block(&self.x0, j + 1);
            continuity = continuity.max(linalg::spectral_norm(&d));
        }
        let u0 = self.segment_block(&self.x0, 0);
        continuity = continuity.max(linalg::spectral_norm(&(&u0 - u0.transpose())));

        PropertyResiduals {
            dynamic,
            symmetry,
            algebraic,
            continuity,
        }
    }

    /// Dynamic and symmetry residuals at a single `τ ∈ [0, H]`.
    pub fn pointwise_residuals(&self, tau: f64) -> (f64, f64) {
        let hmax = self.max_delay();
        let mut rhs = Matrix::zeros(self.n, self.n);
        for (k, a) in &self.terms {
            let arg = (tau - *k as f64 * self.basic_delay).max(-hmax);
            rhs += self.eval(arg) * a;
        }
        let dynamic = linalg::spectral_norm(&(self.derivative(tau) - rhs));
        let symmetry = linalg::spectral_norm(&(self.eval(-tau) - self.eval(tau).transpose()));
        (dynamic, symmetry)
    }

    /// Test hook: shifts one entry of the initial stack.
    #[cfg(test)]
    fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut x0 = self.x0.clone();
        x0[index] += delta;
        LyapunovMatrix {
            n: self.n,
            basic_delay: self.basic_delay,
            segments: self.segments,
            terms: self.terms.clone(),
            w: self.w.clone(),
            lambda: self.lambda.clone(),
            x0,
            condition: self.condition,
            table: OnceLock::new(),
        }
    }
}
