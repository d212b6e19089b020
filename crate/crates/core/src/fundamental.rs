//! The fundamental matrix `K(t)` (`K̇ = Σⱼ AⱼK(t − hⱼ)`, `K(0) = I`,
//! `K(t) = 0` for `t < 0`) and solutions `x(t, φ)`, both by the method of
//! steps.
//!
//! The step divides every delay, so each delayed argument falls on an already
//! computed interval. Classical RK4 is used within a step, with delayed values
//! taken from the cubic Hermite interpolant of the computed samples. The
//! derivative is stored as left and right limits at every node because it
//! jumps wherever a delayed argument crosses zero.

use serde::Serialize;
use thiserror::Error;

use crate::functional::InitialFunction;
use crate::linalg::{self, Matrix, Vector};
use crate::system::{TimeDelaySystem, DEFAULT_COMMENSURATION_TOL};

/// Default number of steps per maximal delay.
pub const DEFAULT_STEPS_PER_DELAY: usize = 2048;

/// Upper bound on stored doubles for one trajectory.
const SAMPLE_BUDGET: usize = 60_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FundamentalError {
    #[error("no step divides all delays within the memory budget (requested step {step})")]
    IncompatibleStep { step: f64 },
    #[error("the system has no positive delay; H > 0 is required")]
    NoDelay,
    #[error("invalid horizon or step: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundMethod {
    RigorousGronwall,
    EmpiricalGrid,
}

/// `L` with `‖K'(t)‖ ≤ L` on `[0, H]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeBound {
    #[serde(rename = "L")]
    pub l: f64,
    pub method: BoundMethod,
}

/// Samples of a matrix- or vector-valued solution on a uniform grid.
#[derive(Debug, Clone)]
struct Samples {
    rows: usize,
    cols: usize,
    step: f64,
    values: Vec<f64>,
    d_right: Vec<f64>,
    d_left: Vec<f64>,
}

impl Samples {
    fn block(&self) -> usize {
        self.rows * self.cols
    }

    fn nodes(&self) -> usize {
        self.values.len() / self.block()
    }

    fn t_end(&self) -> f64 {
        (self.nodes() - 1) as f64 * self.step
    }

    fn node<'a>(&self, buf: &'a [f64], i: usize) -> &'a [f64] {
        let b = self.block();
        &buf[i * b..(i + 1) * b]
    }

    /// Hermite interpolant on interval `k` at local coordinate `theta ∈ [0,1]`.
    fn interp(&self, k: usize, theta: f64, out: &mut [f64]) {
        let h = self.step;
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = (t3 - 2.0 * t2 + theta) * h;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = (t3 - t2) * h;
        let p0 = self.node(&self.values, k);
        let p1 = self.node(&self.values, k + 1);
        let m0 = self.node(&self.d_right, k);
        let m1 = self.node(&self.d_left, k + 1);
        for i in 0..out.len() {
            out[i] = h00 * p0[i] + h10 * m0[i] + h01 * p1[i] + h11 * m1[i];
        }
    }

    fn interp_derivative(&self, k: usize, theta: f64, out: &mut [f64]) {
        let h = self.step;
        let t2 = theta * theta;
        let g00 = (6.0 * t2 - 6.0 * theta) / h;
        let g10 = 3.0 * t2 - 4.0 * theta + 1.0;
        let g01 = (-6.0 * t2 + 6.0 * theta) / h;
        let g11 = 3.0 * t2 - 2.0 * theta;
        let p0 = self.node(&self.values, k);
        let p1 = self.node(&self.values, k + 1);
        let m0 = self.node(&self.d_right, k);
        let m1 = self.node(&self.d_left, k + 1);
        for i in 0..out.len() {
            out[i] = g00 * p0[i] + g10 * m0[i] + g01 * p1[i] + g11 * m1[i];
        }
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.nodes() - 1;
        let x = t / self.step;
        let k = (x.floor() as usize).min(last.saturating_sub(1));
        (k, x - k as f64)
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (k, theta) = self.locate(t);
        self.interp(k, theta, out);
    }

    fn derivative_into(&self, t: f64, out: &mut [f64]) {
        let (k, theta) = self.locate(t);
        self.interp_derivative(k, theta, out);
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

/// Method-of-steps integrator for `Ẋ = A₀X + Σⱼ AⱼX(t − kⱼ·step)`.
struct Stepper<'a> {
    n: usize,
    cols: usize,
    step: f64,
    a0: &'a Matrix,
    delayed: Vec<(usize, &'a Matrix)>,
}

impl Stepper<'_> {
    fn mul_add(&self, a: &Matrix, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for c in 0..self.cols {
            for k in 0..n {
                let xv = x[c * n + k];
                if xv == 0.0 {
                    continue;
                }
                for r in 0..n {
                    y[c * n + r] += a[(r, k)] * xv;
                }
            }
        }
    }

    /// Delayed value on interval `k` (relative to the grid) at `theta`.
    fn delayed_value(
        &self,
        s: &Samples,
        k: i64,
        theta: f64,
        side: Side,
        hist: &dyn Fn(f64, Side, &mut [f64]),
        out: &mut [f64],
    ) {
        if k >= 0 {
            s.interp(k as usize, theta, out);
        } else {
            hist((k as f64 + theta) * self.step, side, out);
        }
    }

    fn rhs(
        &self,
        s: &Samples,
        i: usize,
        theta: f64,
        side: Side,
        state: &[f64],
        hist: &dyn Fn(f64, Side, &mut [f64]),
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.mul_add(self.a0, state, out);
        for &(kd, a) in &self.delayed {
            let k = i as i64 - kd as i64;
            self.delayed_value(s, k, theta, side, hist, scratch);
            self.mul_add(a, scratch, out);
        }
    }

    /// Derivative at node `i` from the given side (state already stored).
    fn node_derivative(
        &self,
        s: &Samples,
        i: usize,
        side: Side,
        hist: &dyn Fn(f64, Side, &mut [f64]),
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.mul_add(self.a0, s.node(&s.values, i), out);
        for &(kd, a) in &self.delayed {
            let k = i as i64 - kd as i64;
            let t = k as f64 * self.step;
            if k > 0 || (k == 0 && side == Side::Right) {
                scratch.copy_from_slice(s.node(&s.values, k as usize));
            } else {
                hist(t, side, scratch);
            }
            self.mul_add(a, scratch, out);
        }
    }

    fn run(&self, x0: &[f64], steps: usize, hist: &dyn Fn(f64, Side, &mut [f64])) -> Samples {
        let b = self.n * self.cols;
        let mut s = Samples {
            rows: self.n,
            cols: self.cols,
            step: self.step,
            values: Vec::with_capacity((steps + 1) * b),
            d_right: Vec::with_capacity((steps + 1) * b),
            d_left: Vec::with_capacity((steps + 1) * b),
        };
        let mut scratch = vec![0.0; b];
        let mut d = vec![0.0; b];
        s.values.extend_from_slice(x0);
        s.d_left.resize(b, 0.0);
        s.d_right.resize(b, 0.0);
        self.node_derivative(&s, 0, Side::Right, hist, &mut scratch, &mut d);
        s.d_right[..b].copy_from_slice(&d);
        self.node_derivative(&s, 0, Side::Left, hist, &mut scratch, &mut d);
        s.d_left[..b].copy_from_slice(&d);

        let h = self.step;
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; b], vec![0.0; b], vec![0.0; b], vec![0.0; b]);
        let mut tmp = vec![0.0; b];
        for i in 0..steps {
            let x: Vec<f64> = s.node(&s.values, i).to_vec();
            self.rhs(&s, i, 0.0, Side::Right, &x, hist, &mut scratch, &mut k1);
            for q in 0..b {
                tmp[q] = x[q] + 0.5 * h * k1[q];
            }
            self.rhs(&s, i, 0.5, Side::Right, &tmp, hist, &mut scratch, &mut k2);
            for q in 0..b {
                tmp[q] = x[q] + 0.5 * h * k2[q];
            }
            self.rhs(&s, i, 0.5, Side::Right, &tmp, hist, &mut scratch, &mut k3);
            for q in 0..b {
                tmp[q] = x[q] + h * k3[q];
            }
            self.rhs(&s, i, 1.0, Side::Left, &tmp, hist, &mut scratch, &mut k4);
            for q in 0..b {
                tmp[q] = x[q] + h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
            }
            s.values.extend_from_slice(&tmp);
            s.d_left.resize((i + 2) * b, 0.0);
            s.d_right.resize((i + 2) * b, 0.0);
            self.node_derivative(&s, i + 1, Side::Left, hist, &mut scratch, &mut d);
            s.d_left[(i + 1) * b..].copy_from_slice(&d);
            self.node_derivative(&s, i + 1, Side::Right, hist, &mut scratch, &mut d);
            s.d_right[(i + 1) * b..].copy_from_slice(&d);
        }
        s
    }
}

/// Step that divides every delay, no larger than `requested`.
pub fn aligned_step(sys: &TimeDelaySystem, requested: f64) -> Result<f64, FundamentalError> {
    if !(requested > 0.0) || !requested.is_finite() {
        return Err(FundamentalError::InvalidArgument(format!("step {requested}")));
    }
    if sys.max_delay() <= 0.0 {
        return Ok(requested);
    }
    let comm = sys
        .commensurate(DEFAULT_COMMENSURATION_TOL)
        .ok_or(FundamentalError::IncompatibleStep { step: requested })?;
    let h = comm.basic_delay;
    let per = (h / requested * (1.0 - 1e-12)).ceil().max(1.0);
    Ok(h / per)
}

fn lattice_spacing(sys: &TimeDelaySystem) -> f64 {
    sys.commensurate(DEFAULT_COMMENSURATION_TOL)
        .map(|c| c.basic_delay)
        .unwrap_or(0.0)
}

fn delay_steps(sys: &TimeDelaySystem, step: f64) -> Vec<(usize, &Matrix)> {
    sys.terms()[1..]
        .iter()
        .map(|t| ((t.delay / step).round() as usize, &t.a))
        .collect()
}

fn step_count(t_end: f64, step: f64, block: usize) -> Result<usize, FundamentalError> {
    let steps = (t_end / step * (1.0 - 1e-12)).ceil().max(1.0);
    if steps * (3 * block) as f64 > SAMPLE_BUDGET as f64 {
        return Err(FundamentalError::IncompatibleStep { step });
    }
    Ok(steps as usize)
}

/// `K(t)` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct FundamentalMatrix {
    n: usize,
    max_delay: f64,
    basic_delay: f64,
    samples: Samples,
}

impl FundamentalMatrix {
    /// Integrates on `[0, t_eval]` (rounded up to a whole step) with a step no
    /// larger than `step` that divides every delay.
    pub fn build(sys: &TimeDelaySystem, t_eval: f64, step: f64) -> Result<Self, FundamentalError> {
        if !(t_eval > 0.0) {
            return Err(FundamentalError::InvalidArgument(format!("horizon {t_eval}")));
        }
        let n = sys.dim();
        let step = aligned_step(sys, step)?;
        let steps = step_count(t_eval, step, n * n)?;
        let stepper = Stepper {
            n,
            cols: n,
            step,
            a0: &sys.terms()[0].a,
            delayed: delay_steps(sys, step),
        };
        let eye = Matrix::identity(n, n);
        let hist = |_t: f64, _side: Side, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
        let samples = stepper.run(eye.as_slice(), steps, &hist);
        Ok(FundamentalMatrix {
            n,
            max_delay: sys.max_delay(),
            basic_delay: lattice_spacing(sys),
            samples,
        })
    }

    /// Default construction on `[0, H]` with step `H/2048`.
    pub fn build_default(sys: &TimeDelaySystem) -> Result<Self, FundamentalError> {
        let h = sys.max_delay();
        if h <= 0.0 {
            return Err(FundamentalError::NoDelay);
        }
        Self::build(sys, h, h / DEFAULT_STEPS_PER_DELAY as f64)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.samples.step
    }

    pub fn t_end(&self) -> f64 {
        self.samples.t_end()
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    /// Spacing of the lattice on which `K` loses smoothness.
    pub fn basic_delay(&self) -> f64 {
        self.basic_delay
    }

    /// Sample times.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.samples.nodes()).map(|i| i as f64 * self.samples.step).collect()
    }

    /// `K(t)`, right-continuous; zero for `t < 0`.
    pub fn eval(&self, t: f64) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        self.eval_into(t, m.as_mut_slice());
        m
    }

    /// Column-major `K(t)` into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        if t < 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        assert!(
            t <= self.t_end() * (1.0 + 1e-12) + 1e-14,
            "K evaluated at {t} beyond the computed horizon {}",
            self.t_end()
        );
        self.samples.eval_into(t, out);
    }

    /// Left limit `K(t⁻)`; differs from [`Self::eval`] only at `t = 0`.
    pub fn eval_left(&self, t: f64) -> Matrix {
        if t <= 0.0 {
            Matrix::zeros(self.n, self.n)
        } else {
            self.eval(t)
        }
    }

    /// `K'(t)` from the interpolant (right derivative at nodes).
    pub fn derivative(&self, t: f64) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        if t >= 0.0 {
            self.samples.derivative_into(t, m.as_mut_slice());
        }
        m
    }

    /// Left and right limits of `K'` at grid node `i`.
    fn node_derivatives(&self, i: usize) -> (Matrix, Matrix) {
        let s = &self.samples;
        (
            Matrix::from_column_slice(self.n, self.n, s.node(&s.d_left, i)),
            Matrix::from_column_slice(self.n, self.n, s.node(&s.d_right, i)),
        )
    }

    /// Node values `K(tᵢ)`.
    pub fn sample(&self, i: usize) -> Matrix {
        let s = &self.samples;
        Matrix::from_column_slice(self.n, self.n, s.node(&s.values, i))
    }

    /// `𝒫ᵣ = (I, K(δ), …, K((r−1)δ))` with `δ = H/(r−1)`.
    pub fn build_pr(&self, r: usize) -> Matrix {
        assert!(r >= 2, "r must be at least 2");
        let n = self.n;
        let delta = self.max_delay / (r - 1) as f64;
        let mut p = Matrix::zeros(n, n * r);
        for i in 0..r {
            let t = if i == r - 1 { self.max_delay } else { i as f64 * delta };
            p.view_mut((0, i * n), (n, n)).copy_from(&self.eval(t));
        }
        p
    }

    /// The blocks of [`Self::build_pr`] as separate matrices.
    pub fn pr_blocks(&self, r: usize) -> Vec<Matrix> {
        let delta = self.max_delay / (r - 1) as f64;
        (0..r)
            .map(|i| {
                let t = if i == r - 1 { self.max_delay } else { i as f64 * delta };
                self.eval(t)
            })
            .collect()
    }
}

/// Bound on `‖K'(t)‖` over `[0, H]`.
pub fn derivative_bound(
    sys: &TimeDelaySystem,
    k: &FundamentalMatrix,
    method: BoundMethod,
) -> Result<DerivativeBound, FundamentalError> {
    let h = sys.max_delay();
    if h <= 0.0 {
        return Err(FundamentalError::NoDelay);
    }
    let l = match method {
        BoundMethod::RigorousGronwall => {
            let (m, _) = sys.norm_constants();
            m * (m * h).exp()
        }
        BoundMethod::EmpiricalGrid => {
            let last = ((h / k.step()).round() as usize).min(k.samples.nodes() - 1);
            let mut l: f64 = 0.0;
            for i in 0..=last {
                let (dl, dr) = k.node_derivatives(i);
                if i > 0 {
                    l = l.max(linalg::spectral_norm(&dl));
                }
                l = l.max(linalg::spectral_norm(&dr));
            }
            l
        }
    };
    Ok(DerivativeBound { l, method })
}

/// A solution `x(t, φ)` on `[−H, T]`.
pub struct Trajectory<P> {
    phi: P,
    basic_delay: f64,
    samples: Samples,
}

impl<P: InitialFunction> Trajectory<P> {
    pub fn t_end(&self) -> f64 {
        self.samples.t_end()
    }

    pub fn step(&self) -> f64 {
        self.samples.step
    }

    /// `x(t)`; `φ(t)` for `t < 0`.
    pub fn eval(&self, t: f64) -> Vector {
        if t < 0.0 {
            return self.phi.eval(t);
        }
        let mut v = Vector::zeros(self.samples.rows);
        self.samples.eval_into(t, v.as_mut_slice());
        v
    }

    /// `x'(t)` for `t ≥ 0` (right derivative at nodes).
    pub fn derivative(&self, t: f64) -> Vector {
        let mut v = Vector::zeros(self.samples.rows);
        self.samples.derivative_into(t.max(0.0), v.as_mut_slice());
        v
    }

    /// Node values `x(i·step)`.
    pub fn node(&self, i: usize) -> Vector {
        Vector::from_column_slice(self.samples.node(&self.samples.values, i))
    }

    pub fn node_count(&self) -> usize {
        self.samples.nodes()
    }

    pub fn basic_delay(&self) -> f64 {
        self.basic_delay
    }

    pub fn initial(&self) -> &P {
        &self.phi
    }
}

/// Integrates `x(t, φ)` on `[0, T]` with the same scheme as the fundamental
/// matrix.
pub fn solve_ivp<P: InitialFunction>(
    sys: &TimeDelaySystem,
    phi: P,
    t_end: f64,
    step: f64,
) -> Result<Trajectory<P>, FundamentalError> {
    let n = sys.dim();
    let step = aligned_step(sys, step)?;
    let steps = step_count(t_end, step, n)?;
    let stepper = Stepper {
        n,
        cols: 1,
        step,
        a0: &sys.terms()[0].a,
        delayed: delay_steps(sys, step),
    };
    let hist = |t: f64, side: Side, out: &mut [f64]| {
        let v = match side {
            Side::Left => phi.eval_left(t),
            Side::Right => phi.eval(t),
        };
        out.copy_from_slice(v.as_slice());
    };
    let x0 = phi.eval(0.0);
    let samples = stepper.run(x0.as_slice(), steps, &hist);
    Ok(Trajectory {
        phi,
        basic_delay: lattice_spacing(sys),
        samples,
    })
}
