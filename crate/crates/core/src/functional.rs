//! Quadrature evaluation of the functionals `v₀`, `v₁` and the bilinear `z`,
//! the initial functions `ψᵣ(θ) = Σᵢ K(θ + τᵢ)γᵢ`, and samples from the set
//! `𝕊 = {φ ∈ C¹: ‖φ‖_H = ‖φ(0)‖ = 1, ‖φ'‖_H ≤ M}`.
//!
//! Integrals are composite Gauss–Legendre over `[−H, 0]` with panels cut at
//! every point where an integrand may lose smoothness: breakpoints of the
//! initial functions and arguments where `U` crosses a multiple of the basic
//! delay.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fundamental::{solve_ivp, FundamentalMatrix, Trajectory};
use crate::linalg::{Matrix, Vector};
use crate::lyapmat::LyapunovMatrix;
use crate::quad;
use crate::system::TimeDelaySystem;

/// Default number of panels across `[−H, 0]`.
pub const DEFAULT_QUAD_PANELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Smoothness {
    PiecewiseContinuous,
    C1,
}

/// A function on `[−H, 0]`, right-continuous at its breakpoints.
pub trait InitialFunction {
    fn dim(&self) -> usize;

    fn eval(&self, theta: f64) -> Vector;

    /// Left limit; equal to [`InitialFunction::eval`] where continuous.
    fn eval_left(&self, theta: f64) -> Vector {
        self.eval(theta)
    }

    fn derivative(&self, _theta: f64) -> Option<Vector> {
        None
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::PiecewiseContinuous
    }

    /// Points of `[−H, 0]` where the function or its derivatives may jump.
    fn breakpoints(&self, _h: f64) -> Vec<f64> {
        Vec::new()
    }
}

impl<T: InitialFunction + ?Sized> InitialFunction for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: f64) -> Vector {
        (**self).eval(theta)
    }
    fn eval_left(&self, theta: f64) -> Vector {
        (**self).eval_left(theta)
    }
    fn derivative(&self, theta: f64) -> Option<Vector> {
        (**self).derivative(theta)
    }
    fn smoothness(&self) -> Smoothness {
        (**self).smoothness()
    }
    fn breakpoints(&self, h: f64) -> Vec<f64> {
        (**self).breakpoints(h)
    }
}

type VecFn = Box<dyn Fn(f64) -> Vector + Send + Sync>;

/// Closure-backed initial function.
pub struct FnInitial {
    dim: usize,
    f: VecFn,
    df: Option<VecFn>,
    breakpoints: Vec<f64>,
}

impl FnInitial {
    pub fn new(dim: usize, f: impl Fn(f64) -> Vector + Send + Sync + 'static) -> Self {
        FnInitial {
            dim,
            f: Box::new(f),
            df: None,
            breakpoints: Vec::new(),
        }
    }

    /// Marks the function C¹ with the given derivative.
    pub fn with_derivative(mut self, df: impl Fn(f64) -> Vector + Send + Sync + 'static) -> Self {
        self.df = Some(Box::new(df));
        self
    }

    pub fn with_breakpoints(mut self, points: Vec<f64>) -> Self {
        self.breakpoints = points;
        self
    }
}

impl InitialFunction for FnInitial {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, theta: f64) -> Vector {
        (self.f)(theta)
    }
    fn derivative(&self, theta: f64) -> Option<Vector> {
        self.df.as_ref().map(|d| d(theta))
    }
    fn smoothness(&self) -> Smoothness {
        if self.df.is_some() {
            Smoothness::C1
        } else {
            Smoothness::PiecewiseContinuous
        }
    }
    fn breakpoints(&self, _h: f64) -> Vec<f64> {
        self.breakpoints.clone()
    }
}

/// `ψ(θ) = Σᵢ K(θ + τᵢ)γᵢ`.
pub struct PsiFunction<'a> {
    k: &'a FundamentalMatrix,
    taus: Vec<f64>,
    gammas: Vec<Vector>,
}

pub fn build_psi<'a>(k: &'a FundamentalMatrix, taus: &[f64], gammas: &[Vector]) -> PsiFunction<'a> {
    assert_eq!(taus.len(), gammas.len(), "one coefficient vector per point");
    assert!(
        taus.windows(2).all(|w| w[0] < w[1]),
        "points must be strictly increasing"
    );
    let h = k.max_delay();
    assert!(
        taus.iter().all(|&t| (0.0..=h * (1.0 + 1e-12)).contains(&t)),
        "points must lie in [0, H]"
    );
    PsiFunction {
        k,
        taus: taus.to_vec(),
        gammas: gammas.to_vec(),
    }
}

/// `τᵢ = (i − 1)H/(r − 1)`, `i = 1..r` (`{0}` for `r = 1`).
pub fn equidistant_taus(h: f64, r: usize) -> Vec<f64> {
    if r <= 1 {
        return vec![0.0];
    }
    (0..r)
        .map(|i| if i == r - 1 { h } else { h * i as f64 / (r - 1) as f64 })
        .collect()
}

impl PsiFunction<'_> {
    fn combine(&self, theta: f64, left: bool) -> Vector {
        let n = self.k.dim();
        let mut out = Vector::zeros(n);
        let mut buf = Matrix::zeros(n, n);
        for (tau, g) in self.taus.iter().zip(&self.gammas) {
            let t = theta + tau;
            if t < 0.0 || (left && t <= 0.0) {
                continue;
            }
            self.k.eval_into(t, buf.as_mut_slice());
            out.gemv(1.0, &buf, g, 1.0);
        }
        out
    }

    /// `ψ(0) = 𝒫·γ` in block form.
    pub fn value_at_zero(&self) -> Vector {
        self.eval(0.0)
    }
}

impl InitialFunction for PsiFunction<'_> {
    fn dim(&self) -> usize {
        self.k.dim()
    }
    fn eval(&self, theta: f64) -> Vector {
        self.combine(theta, false)
    }
    fn eval_left(&self, theta: f64) -> Vector {
        self.combine(theta, true)
    }
    fn breakpoints(&self, h: f64) -> Vec<f64> {
        let lat = self.k.basic_delay();
        let mut out = Vec::new();
        for &tau in &self.taus {
            out.push(-tau);
            if lat > 0.0 {
                out.extend(quad::lattice(-h, 0.0, lat, -tau));
            }
        }
        out
    }
}

/// `φ(θ) = x(θ + t*)/c`, a normalized window of a trajectory.
pub struct TrajectoryWindow<P> {
    traj: Trajectory<P>,
    t_star: f64,
    scale: f64,
}

impl<P: InitialFunction> InitialFunction for TrajectoryWindow<P> {
    fn dim(&self) -> usize {
        self.traj.initial().dim()
    }
    fn eval(&self, theta: f64) -> Vector {
        self.traj.eval(theta + self.t_star) / self.scale
    }
    fn derivative(&self, theta: f64) -> Option<Vector> {
        Some(self.traj.derivative(theta + self.t_star) / self.scale)
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness::C1
    }
    fn breakpoints(&self, h: f64) -> Vec<f64> {
        let lat = self.traj.basic_delay();
        if lat > 0.0 {
            quad::lattice(-h, 0.0, lat, -self.t_star)
        } else {
            Vec::new()
        }
    }
}

fn panel(u: &LyapunovMatrix, quad_points: usize) -> f64 {
    u.max_delay() / quad_points.max(1) as f64
}

fn delays_of(sys: &TimeDelaySystem) -> Vec<(f64, &Matrix)> {
    sys.terms()[1..].iter().map(|t| (t.delay, &t.a)).collect()
}

fn cached<F: InitialFunction + ?Sized>(f: &F, nodes: &[(f64, f64)]) -> Vec<Vector> {
    nodes.iter().map(|(t, _)| f.eval(*t)).collect()
}

/// `Σⱼ ∫_{−hⱼ}^0 U(−θ − hⱼ)Aⱼ f(θ) dθ`
fn single_term<F: InitialFunction + ?Sized>(
    sys: &TimeDelaySystem,
    u: &LyapunovMatrix,
    f: &F,
    quad_points: usize,
) -> Vector {
    let h = u.max_delay();
    let lat = u.basic_delay();
    let n = sys.dim();
    let mut acc = Vector::zeros(n);
    let mut ub = Matrix::zeros(n, n);
    let mut bps = f.breakpoints(h);
    bps.extend(quad::lattice(-h, 0.0, lat, 0.0));
    for (hj, a) in delays_of(sys) {
        let nodes = quad::composite(-hj, 0.0, &bps, panel(u, quad_points));
        for (th, w) in nodes {
            u.eval_fast_into(-th - hj, ub.as_mut_slice());
            acc += (&ub * (a * f.eval(th))) * w;
        }
    }
    acc
}

/// `Σⱼ ∫_{−hⱼ}^0 f(θ)ᵀAⱼᵀU(θ + hⱼ) dθ` as a row vector (returned as a column).
fn single_term_transposed<F: InitialFunction + ?Sized>(
    sys: &TimeDelaySystem,
    u: &LyapunovMatrix,
    f: &F,
    quad_points: usize,
) -> Vector {
    let h = u.max_delay();
    let lat = u.basic_delay();
    let n = sys.dim();
    let mut acc = Vector::zeros(n);
    let mut ub = Matrix::zeros(n, n);
    let mut bps = f.breakpoints(h);
    bps.extend(quad::lattice(-h, 0.0, lat, 0.0));
    for (hj, a) in delays_of(sys) {
        let nodes = quad::composite(-hj, 0.0, &bps, panel(u, quad_points));
        for (th, w) in nodes {
            u.eval_fast_into(th + hj, ub.as_mut_slice());
            let row = (a * f.eval(th)).transpose() * &ub;
            acc += row.transpose() * w;
        }
    }
    acc
}

/// `Σᵢ Σⱼ ∫∫ f(θ₁)ᵀAᵢᵀ U(θ₁ + hᵢ − θ₂ − hⱼ) Aⱼ g(θ₂) dθ₂ dθ₁`
fn double_term<F, G>(sys: &TimeDelaySystem, u: &LyapunovMatrix, f: &F, g: &G, quad_points: usize) -> f64
where
    F: InitialFunction + ?Sized,
    G: InitialFunction + ?Sized,
{
    let h = u.max_delay();
    let lat = u.basic_delay();
    let n = sys.dim();
    let width = panel(u, quad_points);
    let delays = delays_of(sys);
    let f_bps = f.breakpoints(h);
    let g_bps = g.breakpoints(h);
    let mut ub = Matrix::zeros(n, n);
    let mut total = 0.0;
    for &(hi, ai) in &delays {
        for &(hj, aj) in &delays {
            // Outer cuts: f's own, the lattice, and where inner kinks meet g's breakpoints.
            let mut outer = f_bps.clone();
            outer.extend(quad::lattice(-hi, 0.0, lat, 0.0));
            for &b in &g_bps {
                outer.extend(quad::lattice(-hi, 0.0, lat, b + hj - hi));
            }
            outer.extend(quad::lattice(-hi, 0.0, lat, -hj - hi));
            let outer_nodes = quad::composite(-hi, 0.0, &outer, width);
            // g is needed at the inner nodes of every outer node; cache on a
            // shared refinement when the kink set does not depend on θ₁.
            for (t1, w1) in outer_nodes {
                let left = (ai * f.eval(t1)).transpose();
                let mut inner_bps = g_bps.clone();
                inner_bps.extend(quad::lattice(-hj, 0.0, lat, t1 + hi - hj));
                inner_bps.push(t1 + hi - hj);
                let inner_nodes = quad::composite(-hj, 0.0, &inner_bps, width);
                let gv = cached(g, &inner_nodes);
                let mut inner = Vector::zeros(n);
                for ((t2, w2), gx) in inner_nodes.iter().zip(&gv) {
                    u.eval_fast_into(t1 + hi - t2 - hj, ub.as_mut_slice());
                    inner += (&ub * (aj * gx)) * *w2;
                }
                total += w1 * (&left * inner)[(0, 0)];
            }
        }
    }
    total
}

fn weight_term<F, G>(sys: &TimeDelaySystem, h: f64, f: &F, g: &G, width: f64) -> f64
where
    F: InitialFunction + ?Sized,
    G: InitialFunction + ?Sized,
{
    let mut bps = f.breakpoints(h);
    bps.extend(g.breakpoints(h));
    quad::composite(-h, 0.0, &bps, width)
        .into_iter()
        .map(|(t, w)| w * f.eval(t).dot(&(sys.weight() * g.eval(t))))
        .sum()
}

/// `v₀(φ)`.
pub fn eval_v0<F: InitialFunction + ?Sized>(
    sys: &TimeDelaySystem,
    u: &LyapunovMatrix,
    phi: &F,
    quad_points: usize,
) -> f64 {
    let p0 = phi.eval(0.0);
    let first = p0.dot(&(u.eval(0.0) * &p0));
    let cross = 2.0 * p0.dot(&single_term(sys, u, phi, quad_points));
    first + cross + double_term(sys, u, phi, phi, quad_points)
}

/// `v₁(φ) = v₀(φ) + ∫ φᵀWφ`.
pub fn eval_v1<F: InitialFunction + ?Sized>(
    sys: &TimeDelaySystem,
    u: &LyapunovMatrix,
    phi: &F,
    quad_points: usize,
) -> f64 {
    let h = u.max_delay();
    eval_v0(sys, u, phi, quad_points) + weight_term(sys, h, phi, phi, panel(u, quad_points))
}

/// The bilinear functional `z(φ, ψ)` with `z(φ, φ) = v₁(φ)`.
pub fn eval_z<F, G>(sys: &TimeDelaySystem, u: &LyapunovMatrix, phi: &F, psi: &G, quad_points: usize) -> f64
where
    F: InitialFunction + ?Sized,
    G: InitialFunction + ?Sized,
{
    let h = u.max_delay();
    let p0 = phi.eval(0.0);
    let q0 = psi.eval(0.0);
    let t1 = p0.dot(&(u.eval(0.0) * &q0));
    let t2 = p0.dot(&single_term(sys, u, psi, quad_points));
    let t3 = single_term_transposed(sys, u, phi, quad_points).dot(&q0);
    let t4 = double_term(sys, u, phi, psi, quad_points);
    let t5 = weight_term(sys, h, phi, psi, panel(u, quad_points));
    t1 + t2 + t3 + t4 + t5
}

/// `εᵣ = (M + L)e^{LH}/(1/δᵣ + L)`, `δᵣ = H/(r − 1)`.
pub fn approx_error_bound(m: f64, l: f64, h: f64, r: usize) -> f64 {
    assert!(r >= 2, "r must be at least 2");
    let delta = h / (r - 1) as f64;
    (m + l) * (l * h).exp() / (1.0 / delta + l)
}

/// `sup ‖φ(θ)‖` on a grid of `samples` points plus the breakpoints.
pub fn sup_norm<F: InitialFunction + ?Sized>(phi: &F, h: f64, samples: usize) -> f64 {
    let mut pts: Vec<f64> = (0..=samples).map(|i| -h + h * i as f64 / samples as f64).collect();
    pts.extend(phi.breakpoints(h));
    pts.into_iter().map(|t| phi.eval(t).norm()).fold(0.0, f64::max)
}

/// Smooth random initial function used to seed trajectories.
pub fn random_smooth(n: usize, h: f64, rng: &mut impl Rng) -> FnInitial {
    let terms: Vec<(Vector, Vector, f64)> = (0..3)
        .map(|_| {
            let c = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let d = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let w = rng.random_range(0.0..3.0) / h.max(1e-3);
            (c, d, w)
        })
        .collect();
    let t2 = terms.clone();
    FnInitial::new(n, move |t| {
        terms
            .iter()
            .map(|(c, d, w)| c * (w * t).cos() + d * (w * t).sin())
            .fold(Vector::zeros(n), |a, b| a + b)
    })
    .with_derivative(move |t| {
        t2.iter()
            .map(|(c, d, w)| (d * (w * t).cos() - c * (w * t).sin()) * *w)
            .fold(Vector::zeros(n), |a, b| a + b)
    })
}

/// An element of `𝕊`.
pub type SElement = Box<dyn InitialFunction + Send + Sync>;

/// `count` verified elements of `𝕊`.
///
/// Trajectory windows `x(θ + t*)/‖x(t*)‖` are tried first, at nodes where
/// `‖x‖` is maximal over `[t* − 2H, t*]`, which makes the derivative bound
/// hold. Solutions of stable systems decay too fast for such nodes to be
/// common, so the remainder is drawn as `φ(θ) = ρ(θ)d(θ)` with `ρ ≤ ρ(0) = 1`
/// and a unit direction `d` rotating at rate at most `M/2`.
pub fn sample_s_set(sys: &TimeDelaySystem, count: usize, seed: u64) -> Vec<SElement> {
    let h = sys.max_delay();
    let n = sys.dim();
    let (m, _) = sys.norm_constants();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SElement> = Vec::with_capacity(count);
    let step = h / 256.0;
    for _ in 0..count {
        let phi0 = random_smooth(n, h, &mut rng);
        let Ok(traj) = solve_ivp(sys, phi0, 12.0 * h, step) else {
            break;
        };
        let st = traj.step();
        let window = (2.0 * h / st).round() as usize;
        let nodes = traj.node_count();
        let norms: Vec<f64> = (0..nodes).map(|i| traj.node(i).norm()).collect();
        let candidates: Vec<usize> = (window.max(1)..nodes)
            .filter(|&i| norms[i] > 0.0 && norms[i - window..i].iter().all(|&v| v <= norms[i]))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        let win = TrajectoryWindow {
            t_star: pick as f64 * st,
            scale: norms[pick],
            traj,
        };
        if in_s_set(&win, h, m) {
            out.push(Box::new(win));
        }
    }
    log::debug!("{} trajectory windows in S", out.len());
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let phi = random_s_element(n, m, &mut rng);
        if in_s_set(&phi, h, m) {
            out.push(Box::new(phi));
        }
    }
    out
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-3 {
            return v / norm;
        }
    }
}

/// `ρ(θ)·(cos(ωθ)p + sin(ωθ)q)` with orthonormal `p, q` (just `±p` when
/// `n = 1`) and `ρ(θ) = 1 − β(1 − cos κθ)`, `β ≤ 1/2`.
fn random_s_element(n: usize, m: f64, rng: &mut impl Rng) -> FnInitial {
    let p = random_unit(n, rng);
    let q = if n > 1 {
        let r = random_unit(n, rng);
        let q = &r - &p * p.dot(&r);
        if q.norm() > 1e-6 { q.normalize() } else { Vector::zeros(n) }
    } else {
        Vector::zeros(n)
    };
    let omega = if n > 1 { rng.random_range(-0.5..0.5) * m } else { 0.0 };
    let beta = rng.random_range(0.0..0.5);
    // |ρ'| ≤ βκ ≤ M/2
    let kappa = if beta > 0.0 { rng.random_range(0.0..1.0) * 0.5 * m / beta } else { 0.0 };
    let (p2, q2) = (p.clone(), q.clone());
    FnInitial::new(n, move |t| {
        let rho = 1.0 - beta * (1.0 - (kappa * t).cos());
        (&p * (omega * t).cos() + &q * (omega * t).sin()) * rho
    })
    .with_derivative(move |t| {
        let rho = 1.0 - beta * (1.0 - (kappa * t).cos());
        let drho = -beta * kappa * (kappa * t).sin();
        let d = &p2 * (omega * t).cos() + &q2 * (omega * t).sin();
        let dd = (&q2 * (omega * t).cos() - &p2 * (omega * t).sin()) * omega;
        d * drho + dd * rho
    })
}

/// Checks `‖φ‖_H ≤ ‖φ(0)‖ = 1` and `‖φ'‖_H ≤ M` on a fine grid.
pub fn in_s_set<F: InitialFunction + ?Sized>(phi: &F, h: f64, m: f64) -> bool {
    let tol = 1e-8;
    if (phi.eval(0.0).norm() - 1.0).abs() > tol {
        return false;
    }
    let grid = 2048;
    (0..=grid).all(|i| {
        let t = -h + h * i as f64 / grid as f64;
        let ok_value = phi.eval(t).norm() <= 1.0 + tol;
        let ok_slope = phi
            .derivative(t)
            .map(|d| d.norm() <= m * (1.0 + tol))
            .unwrap_or(false);
        ok_value && ok_slope
    })
}
