//! Positivity tests on `𝒦ᵣ`, the constants behind the finite criteria and
//! the resulting verdicts.
//!
//! The necessary conditions test `[U(τⱼ − τᵢ)] ≻ 0` for a user-chosen `r`.
//! The finite criteria compute an `r` from the system data alone and test
//! `𝒦ᵣ ≻ 0` or `𝒦ᵣ − α₀𝒫ᵣᵀ𝒫ᵣ ≻ 0`, which is then necessary and sufficient.

use std::fmt;
use std::time::Instant;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::functional::equidistant_taus;
use crate::fundamental::{aligned_step, derivative_bound, BoundMethod, FundamentalError, FundamentalMatrix};
use crate::linalg::{self, BlockToeplitz, Definiteness, DefinitenessClass, LinalgError, LowRankPenalty, Matrix};
use crate::lyapmat::{LyapmatError, LyapunovConditionStatus, LyapunovMatrix, PropertyResiduals};
use crate::par;
use crate::system::TimeDelaySystem;

/// Default cap on `n·r`.
pub const DEFAULT_MEM_CAP: usize = 20_000;

/// Environment variable overriding [`DEFAULT_MEM_CAP`].
pub const MEM_CAP_ENV: &str = "DELAYLYAP_MEM_CAP";

/// Samples of `‖U(τ)‖` behind `ν`, and the safety factor applied to their max.
pub const NU_SAMPLES: usize = 4096;
pub const NU_SAFETY: f64 = 1.01;

/// Above this dimension `𝒦ᵣ` is never formed densely.
const DENSE_LIMIT: usize = 800;

const RESIDUAL_GRID: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Stable,
    Unstable,
    LyapunovConditionFails,
    UndecidedNumeric,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "STABLE",
            Verdict::Unstable => "UNSTABLE",
            Verdict::LyapunovConditionFails => "LYAPUNOV_CONDITION_FAILS",
            Verdict::UndecidedNumeric => "UNDECIDED_NUMERIC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Thm7,
    Thm8,
    NecessaryOnly(usize),
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Thm7 => f.write_str("THM7"),
            Criterion::Thm8 => f.write_str("THM8"),
            Criterion::NecessaryOnly(r) => write!(f, "NECESSARY_ONLY_{r}"),
        }
    }
}

impl Serialize for Criterion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Which finite criterion to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finite {
    Thm7,
    Thm8,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CriteriaError {
    #[error(transparent)]
    Lyapmat(#[from] LyapmatError),
    #[error(transparent)]
    Fundamental(#[from] FundamentalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("n*r = {required} exceeds the memory cap {cap} (r = {r}); raise {MEM_CAP_ENV} to proceed")]
    MemoryBudget { r: u64, required: u128, cap: usize },
    #[error("numerical inconsistency: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Every constant of the finite criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriterionConstants {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "M1")]
    pub m1: f64,
    pub nu: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub rho: f64,
    pub a: f64,
    pub b: f64,
    pub beta_star: f64,
    pub alpha0_star: f64,
    pub alpha0_used: f64,
    pub r_thm7: u64,
    pub r_thm8: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub criterion: Criterion,
    pub r_used: u64,
    pub definiteness: Option<DefinitenessClass>,
    pub min_eigenvalue: Option<f64>,
    pub tolerance: Option<f64>,
    pub constants: Option<CriterionConstants>,
    pub residuals: Option<PropertyResiduals>,
    pub condition: Option<LyapunovConditionStatus>,
    pub wall_ms: f64,
}

/// What a check runs: a necessary condition with fixed `r`, or a finite
/// criterion. Parsed from `necessary:R`, `thm7` or `thm8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Necessary(usize),
    Finite(Finite),
}

impl std::str::FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "thm7" => Ok(Selection::Finite(Finite::Thm7)),
            "thm8" => Ok(Selection::Finite(Finite::Thm8)),
            _ => {
                let r = lower
                    .strip_prefix("necessary:")
                    .or_else(|| lower.strip_prefix("fixed:"))
                    .ok_or_else(|| format!("unknown criterion '{s}' (expected necessary:R, thm7 or thm8)"))?;
                match r.parse::<usize>() {
                    Ok(r) if r >= 1 => Ok(Selection::Necessary(r)),
                    _ => Err(format!("invalid r in '{s}'")),
                }
            }
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Necessary(r) => write!(f, "necessary:{r}"),
            Selection::Finite(Finite::Thm7) => f.write_str("thm7"),
            Selection::Finite(Finite::Thm8) => f.write_str("thm8"),
        }
    }
}

/// Runs `sel` on `sys`.
pub fn run(sys: &TimeDelaySystem, sel: Selection, opts: &Options) -> Result<StabilityReport, CriteriaError> {
    match sel {
        Selection::Necessary(r) => necessary_report(sys, r),
        Selection::Finite(which) => finite_criterion(sys, which, opts),
    }
}

/// Knobs of [`finite_criterion`].
#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    /// Upper bound on the real parts of the characteristic roots; `M` if unset.
    pub a_bound: Option<f64>,
    /// `α₀ = alpha0_frac·α₀*`.
    pub alpha0_frac: f64,
    /// Cap on `n·r`; [`mem_cap_from_env`] if unset.
    pub mem_cap: Option<usize>,
    /// Integration step for `K`; `H/2048` if unset.
    pub step: Option<f64>,
    /// Tests this `r` instead of the computed one.
    pub r_override: Option<u64>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            a_bound: None,
            alpha0_frac: 0.5,
            mem_cap: None,
            step: None,
            r_override: None,
        }
    }
}

/// [`DEFAULT_MEM_CAP`] unless [`MEM_CAP_ENV`] holds a positive integer.
pub fn mem_cap_from_env() -> usize {
    std::env::var(MEM_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_MEM_CAP)
}

/// `U(dδᵣ)` for `d = 0..r`.
fn kr_blocks(u: &LyapunovMatrix, r: usize) -> Vec<Matrix> {
    let taus = equidistant_taus(u.max_delay(), r);
    par::map_slice(&taus, |&t| u.eval(t))
}

/// `𝒦ᵣ = [U((j − i)δᵣ)]`, symmetrized; `𝒦₁ = U(0)`.
pub fn assemble_kr(u: &LyapunovMatrix, r: usize) -> Matrix {
    assert!(r >= 1, "r must be positive");
    BlockToeplitz::new(&kr_blocks(u, r)).to_dense()
}

/// `[U(τⱼ − τᵢ)]` for arbitrary increasing points.
pub fn assemble_general(u: &LyapunovMatrix, taus: &[f64]) -> Matrix {
    let n = u.dim();
    let r = taus.len();
    let mut k = Matrix::zeros(n * r, n * r);
    for i in 0..r {
        for j in i..r {
            let b = u.eval(taus[j] - taus[i]);
            k.view_mut((i * n, j * n), (n, n)).copy_from(&b);
            if i != j {
                k.view_mut((j * n, i * n), (n, n)).copy_from(&b.transpose());
            }
        }
    }
    linalg::symmetrize(&k)
}

/// Definiteness of `[U(τⱼ − τᵢ)]`.
pub fn necessary_test(u: &LyapunovMatrix, taus: &[f64]) -> Result<Definiteness, CriteriaError> {
    if taus.is_empty() || !taus.windows(2).all(|w| w[0] < w[1]) {
        return Err(CriteriaError::InvalidArgument(
            "points must be nonempty and strictly increasing".into(),
        ));
    }
    Ok(linalg::classify_definiteness(&assemble_general(u, taus), None)?)
}

/// Whether `‖U(τ)‖ < ‖U(0)‖` at `grid` equidistant points of `(0, H]`.
pub fn rough_test(u: &LyapunovMatrix, grid: usize) -> bool {
    let h = u.max_delay();
    let u0 = linalg::spectral_norm(&u.eval(0.0));
    (1..=grid.max(1)).all(|i| linalg::spectral_norm(&u.eval(h * i as f64 / grid.max(1) as f64)) < u0)
}

/// Definiteness of `𝒦ᵣ` (minus the penalty), dense for small matrices and by
/// the block Levinson recursion otherwise.
pub fn test_kr(u: &LyapunovMatrix, r: usize, penalty: Option<&LowRankPenalty>) -> Result<Definiteness, CriteriaError> {
    let blocks = kr_blocks(u, r);
    let t = BlockToeplitz::new(&blocks);
    if t.dim() <= DENSE_LIMIT {
        let mut dense = t.to_dense();
        if let Some(p) = penalty {
            let n = t.block_size();
            let mut stacked = Matrix::zeros(n, t.dim());
            for (i, b) in p.blocks.iter().enumerate() {
                stacked.view_mut((0, i * n), (n, n)).copy_from(b);
            }
            dense -= stacked.transpose() * stacked * p.weight;
        }
        Ok(linalg::classify_definiteness(&dense, None)?)
    } else {
        Ok(t.classify(penalty, None))
    }
}

fn verdict_of(d: &Definiteness) -> Verdict {
    match d.class {
        DefinitenessClass::PositiveDefinite => Verdict::Stable,
        DefinitenessClass::NotPositiveSemidefinite => Verdict::Unstable,
        DefinitenessClass::PositiveSemidefiniteSingular => Verdict::UndecidedNumeric,
    }
}

fn condition_failure(
    criterion: Criterion,
    sigma_rel: f64,
    start: Instant,
) -> StabilityReport {
    StabilityReport {
        verdict: Verdict::LyapunovConditionFails,
        criterion,
        r_used: 0,
        definiteness: None,
        min_eigenvalue: None,
        tolerance: None,
        constants: None,
        residuals: None,
        condition: Some(LyapunovConditionStatus {
            holds: false,
            sigma_min_rel: sigma_rel,
        }),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn build_u(sys: &TimeDelaySystem) -> Result<Result<LyapunovMatrix, f64>, CriteriaError> {
    match LyapunovMatrix::build(sys) {
        Ok(u) => Ok(Ok(u)),
        Err(LyapmatError::LyapunovConditionFails { sigma_rel }) => Ok(Err(sigma_rel)),
        Err(e) => Err(e.into()),
    }
}

/// The necessary condition with `r` equidistant points. `STABLE` here means
/// the condition holds, which does not by itself prove stability.
pub fn necessary_report(sys: &TimeDelaySystem, r: usize) -> Result<StabilityReport, CriteriaError> {
    let start = Instant::now();
    if r == 0 {
        return Err(CriteriaError::InvalidArgument("r must be positive".into()));
    }
    let criterion = Criterion::NecessaryOnly(r);
    let u = match build_u(sys)? {
        Ok(u) => u,
        Err(sigma) => return Ok(condition_failure(criterion, sigma, start)),
    };
    let d = test_kr(&u, r, None)?;
    Ok(StabilityReport {
        verdict: verdict_of(&d),
        criterion,
        r_used: r as u64,
        definiteness: Some(d.class),
        min_eigenvalue: Some(d.min_eigenvalue),
        tolerance: Some(d.tolerance_used),
        constants: None,
        residuals: Some(u.check_properties(RESIDUAL_GRID)),
        condition: Some(u.condition()),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// `A = (A₀, …, A_m)` and `P = (I ⊗ W⁻¹)(e₁ ⊗ I·A + Aᵀ·e₁ᵀ ⊗ I)`; returns
/// `λ_min(P)`. `P` is similar to a symmetric matrix through the Cholesky
/// factor of `W`, so its spectrum is real.
pub fn lambda_min_p(sys: &TimeDelaySystem) -> Result<f64, CriteriaError> {
    let n = sys.dim();
    let blocks = sys.terms().len();
    let mut s = Matrix::zeros(n * blocks, n * blocks);
    for (j, t) in sys.terms().iter().enumerate() {
        let mut top = s.view_mut((0, j * n), (n, n));
        top += &t.a;
        let mut left = s.view_mut((j * n, 0), (n, n));
        left += t.a.transpose();
    }
    let chol = sys
        .weight()
        .clone()
        .cholesky()
        .ok_or_else(|| CriteriaError::Numeric("W is not positive definite".into()))?;
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| CriteriaError::Numeric("singular Cholesky factor".into()))?;
    let mut d = Matrix::zeros(n * blocks, n * blocks);
    for j in 0..blocks {
        d.view_mut((j * n, j * n), (n, n)).copy_from(&linv);
    }
    let sym = &d * s * d.transpose();
    Ok(linalg::symmetric_eigenvalues(&sym)?[0])
}

/// `α₀* = −1/((m + 1)λ_min(P))`.
pub fn compute_alpha0_star(sys: &TimeDelaySystem) -> Result<f64, CriteriaError> {
    let lmin = lambda_min_p(sys)?;
    if lmin >= -1e-14 {
        return Err(CriteriaError::Numeric(format!(
            "lambda_min(P) = {lmin:e} is not negative"
        )));
    }
    Ok(-1.0 / (sys.terms().len() as f64 * lmin))
}

/// `α₁ = λ_min(W)/(m + 1)`.
pub fn alpha1(sys: &TimeDelaySystem) -> Result<f64, CriteriaError> {
    let lw = linalg::symmetric_eigenvalues(sys.weight())?[0];
    Ok(lw / sys.terms().len() as f64)
}

/// `g(b) = ((aH)² + b²)sin⁴b − (aH)²`.
pub fn b_residual(ah: f64, b: f64) -> f64 {
    let s2 = b.sin().powi(2);
    (ah * ah + b * b) * s2 * s2 - ah * ah
}

/// Root of [`b_residual`] on `(0, π/2)` by bisection.
pub fn solve_b(ah: f64) -> f64 {
    assert!(ah > 0.0 && ah.is_finite(), "aH must be positive");
    let (mut lo, mut hi) = (0.0_f64, std::f64::consts::FRAC_PI_2);
    let target = 1e-13 * ah * ah;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // adjacent floats: return the endpoint with the smaller residual
            return if b_residual(ah, lo).abs() <= b_residual(ah, hi).abs() { lo } else { hi };
        }
        let g = b_residual(ah, mid);
        if g.abs() <= target {
            return mid;
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// `(b, β*)` with `β* = λ_min(W)/(4a)·e^{−2aH}·cos²b`.
pub fn compute_beta_star(sys: &TimeDelaySystem, a: f64) -> Result<(f64, f64), CriteriaError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(CriteriaError::InvalidArgument(format!("a = {a} must be positive")));
    }
    let h = sys.max_delay();
    let b = solve_b(a * h);
    let lw = linalg::symmetric_eigenvalues(sys.weight())?[0];
    Ok((b, lw / (4.0 * a) * (-2.0 * a * h).exp() * b.cos().powi(2)))
}

/// `r = 1 + ⌈He^{LH}(M + L)(α + √(α(α + 1))) − HL⌉`, at least 2, saturating.
pub fn r_from_alpha(m: f64, l: f64, h: f64, alpha: f64) -> u64 {
    let x = h * (l * h).exp() * (m + l) * (alpha + (alpha * (alpha + 1.0)).sqrt()) - h * l;
    let r = 1.0 + x.ceil();
    if !r.is_finite() || r >= u64::MAX as f64 {
        u64::MAX
    } else {
        (r.max(2.0)) as u64
    }
}

/// All constants for a built `U`.
pub fn compute_constants(
    sys: &TimeDelaySystem,
    u: &LyapunovMatrix,
    k: &FundamentalMatrix,
    a_bound: Option<f64>,
    alpha0_frac: f64,
) -> Result<CriterionConstants, CriteriaError> {
    if !(alpha0_frac > 0.0 && alpha0_frac < 1.0) {
        return Err(CriteriaError::InvalidArgument(format!(
            "alpha0_frac = {alpha0_frac} must lie in (0, 1)"
        )));
    }
    let h = sys.max_delay();
    let (m, m1) = sys.norm_constants();
    let nu = NU_SAFETY * u.sup_norm(NU_SAMPLES);
    let l = derivative_bound(sys, k, BoundMethod::RigorousGronwall)?.l;
    let rho = nu * (1.0 + m1).powi(2) + h * linalg::spectral_norm(sys.weight());
    let a = a_bound.unwrap_or(m);
    let (b, beta_star) = compute_beta_star(sys, a)?;
    let alpha0_star = compute_alpha0_star(sys)?;
    let alpha0_used = alpha0_frac * alpha0_star;
    Ok(CriterionConstants {
        m,
        m1,
        nu,
        l,
        rho,
        a,
        b,
        beta_star,
        alpha0_star,
        alpha0_used,
        r_thm7: r_from_alpha(m, l, h, rho / beta_star),
        r_thm8: r_from_alpha(m, l, h, rho / (beta_star + alpha0_used)),
    })
}

/// Runs the finite criterion: the Lyapunov condition, the constants, the
/// computed `r`, and the positivity test.
pub fn finite_criterion(sys: &TimeDelaySystem, which: Finite, opts: &Options) -> Result<StabilityReport, CriteriaError> {
    let start = Instant::now();
    let criterion = match which {
        Finite::Thm7 => Criterion::Thm7,
        Finite::Thm8 => Criterion::Thm8,
    };
    let u = match build_u(sys)? {
        Ok(u) => u,
        Err(sigma) => return Ok(condition_failure(criterion, sigma, start)),
    };
    let h = sys.max_delay();
    let step = aligned_step(sys, opts.step.unwrap_or(h / crate::fundamental::DEFAULT_STEPS_PER_DELAY as f64))?;
    let k = FundamentalMatrix::build(sys, h, step)?;
    let constants = compute_constants(sys, &u, &k, opts.a_bound, opts.alpha0_frac)?;
    let r = opts.r_override.unwrap_or(match which {
        Finite::Thm7 => constants.r_thm7,
        Finite::Thm8 => constants.r_thm8,
    });
    let cap = opts.mem_cap.unwrap_or_else(mem_cap_from_env);
    let required = sys.dim() as u128 * r as u128;
    if required > cap as u128 {
        return Err(CriteriaError::MemoryBudget { r, required, cap });
    }
    let r = r as usize;
    log::info!("{criterion}: testing r = {r}");
    let d = match which {
        Finite::Thm7 => test_kr(&u, r, None)?,
        Finite::Thm8 => {
            let penalty = LowRankPenalty {
                weight: constants.alpha0_used,
                blocks: k.pr_blocks(r),
            };
            test_kr(&u, r, Some(&penalty))?
        }
    };
    Ok(StabilityReport {
        verdict: verdict_of(&d),
        criterion,
        r_used: r as u64,
        definiteness: Some(d.class),
        min_eigenvalue: Some(d.min_eigenvalue),
        tolerance: Some(d.tolerance_used),
        constants: Some(constants),
        residuals: Some(u.check_properties(RESIDUAL_GRID)),
        condition: Some(u.condition()),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// The constants alone, without running a positivity test.
pub fn constants_for(sys: &TimeDelaySystem, opts: &Options) -> Result<CriterionConstants, CriteriaError> {
    let u = LyapunovMatrix::build(sys)?;
    let h = sys.max_delay();
    let step = aligned_step(sys, opts.step.unwrap_or(h / crate::fundamental::DEFAULT_STEPS_PER_DELAY as f64))?;
    let k = FundamentalMatrix::build(sys, h, step)?;
    compute_constants(sys, &u, &k, opts.a_bound, opts.alpha0_frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example2(a: f64, h: f64) -> TimeDelaySystem {
        let a1 = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, a]);
        TimeDelaySystem::new(vec![(h, a1)], None).unwrap()
    }

    fn scalar(a0: f64, a1: f64, h: f64) -> TimeDelaySystem {
        TimeDelaySystem::new(
            vec![(0.0, Matrix::from_element(1, 1, a0)), (h, Matrix::from_element(1, 1, a1))],
            None,
        )
        .unwrap()
    }

    #[test]
    fn selection_parsing() {
        assert_eq!("thm7".parse::<Selection>().unwrap(), Selection::Finite(Finite::Thm7));
        assert_eq!("THM8".parse::<Selection>().unwrap(), Selection::Finite(Finite::Thm8));
        assert_eq!("necessary:6".parse::<Selection>().unwrap(), Selection::Necessary(6));
        assert!("necessary:0".parse::<Selection>().is_err());
        assert!("thm9".parse::<Selection>().is_err());
        assert_eq!(Selection::Necessary(4).to_string(), "necessary:4");
    }

    #[test]
    fn kr_small_cases() {
        let u = LyapunovMatrix::build(&example2(-1.25, 0.5)).unwrap();
        let k1 = assemble_kr(&u, 1);
        assert!((k1 - u.eval(0.0)).amax() < 1e-14);
        let k2 = assemble_kr(&u, 2);
        let uh = u.eval(0.5);
        assert!((k2.view((0, 2), (2, 2)) - &uh).amax() < 1e-14);
        assert!((k2.view((2, 0), (2, 2)) - uh.transpose()).amax() < 1e-14);
        let k5 = assemble_kr(&u, 5);
        assert!((&k5 - k5.transpose()).amax() == 0.0);
    }

    #[test]
    fn general_matches_equidistant() {
        let u = LyapunovMatrix::build(&example2(-1.25, 0.5)).unwrap();
        let a = assemble_kr(&u, 4);
        let b = assemble_general(&u, &equidistant_taus(0.5, 4));
        assert!((a - b).amax() < 1e-13);
    }

    #[test]
    fn table_rows_necessary() {
        let stable = LyapunovMatrix::build(&example2(-1.25, 0.5)).unwrap();
        let d = necessary_test(&stable, &equidistant_taus(0.5, 6)).unwrap();
        assert!(d.is_positive_definite());
        assert!(necessary_test(&stable, &[0.0]).unwrap().is_positive_definite());
        let unstable = LyapunovMatrix::build(&example2(1.25, 0.5)).unwrap();
        let d = test_kr(&unstable, 79, None).unwrap();
        assert_eq!(d.class, DefinitenessClass::NotPositiveSemidefinite);
    }

    #[test]
    fn rough_condition_on_stable_point() {
        let u = LyapunovMatrix::build(&example2(-1.25, 0.5)).unwrap();
        assert!(rough_test(&u, 256));
    }

    #[test]
    fn structured_and_dense_paths_agree() {
        let sys = example2(-1.25, 0.75);
        let u = LyapunovMatrix::build(&sys).unwrap();
        let k = FundamentalMatrix::build(&sys, 0.75, 0.75 / 2048.0).unwrap();
        for r in [3usize, 17, 60] {
            let penalty = LowRankPenalty {
                weight: 0.05,
                blocks: k.pr_blocks(r),
            };
            let dense = test_kr(&u, r, Some(&penalty)).unwrap();
            let t = BlockToeplitz::new(&kr_blocks(&u, r));
            let fast = t.classify(Some(&penalty), None);
            assert_eq!(dense.class, fast.class, "r = {r}");
            let rel = (dense.min_eigenvalue - fast.min_eigenvalue).abs() / dense.min_eigenvalue.abs();
            assert!(rel < 0.05, "r = {r}: {} vs {}", dense.min_eigenvalue, fast.min_eigenvalue);
        }
    }

    #[test]
    fn alpha0_star_scalar() {
        let sys = scalar(0.0, -1.0, 1.0);
        assert!((lambda_min_p(&sys).unwrap() + 1.0).abs() < 1e-14);
        assert!((compute_alpha0_star(&sys).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn alpha0_star_scales_with_w() {
        let sys = example2(-1.25, 0.5);
        let a = compute_alpha0_star(&sys).unwrap();
        let b = compute_alpha0_star(&sys.with_weight(Matrix::identity(2, 2) * 2.0)).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn b_solver_contract() {
        for ah in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let b = solve_b(ah);
            assert!(b > 0.0 && b < std::f64::consts::FRAC_PI_2);
            assert!(b_residual(ah, b).abs() <= 1e-13 * ah * ah, "aH = {ah}");
            assert_eq!(b_residual(ah, 0.0), -ah * ah);
            assert!(b_residual(ah, std::f64::consts::FRAC_PI_2) > 0.0);
        }
        let mut prev = 0.0;
        for i in 1..60 {
            let b = solve_b(0.05 * i as f64);
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn r_formula_shape() {
        assert_eq!(r_from_alpha(1.0, 1.0, 1.0, 0.0), 2);
        let mut prev = 0;
        for i in 0..50 {
            let r = r_from_alpha(1.4, 2.0, 0.5, 0.5 * i as f64);
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(r_from_alpha(50.0, 1e3, 10.0, 1e6), u64::MAX);
    }

    #[test]
    fn thm8_r_smaller_than_thm7() {
        for (a, h) in [(-1.25, 0.5), (-1.25, 0.75), (1.25, 0.5), (1.25, 1.25)] {
            let c = constants_for(&example2(a, h), &Options::default()).unwrap();
            assert!(c.r_thm8 < c.r_thm7, "({a},{h}): {} vs {}", c.r_thm8, c.r_thm7);
            assert!(c.b > 0.0 && c.b < std::f64::consts::FRAC_PI_2);
            assert!(c.alpha0_used > 0.0 && c.alpha0_used < c.alpha0_star);
            for v in [c.m, c.m1, c.nu, c.l, c.rho, c.a, c.beta_star] {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn first_row_is_stable() {
        let sys = example2(-1.25, 0.5);
        for which in [Finite::Thm7, Finite::Thm8] {
            let rep = finite_criterion(&sys, which, &Options::default()).unwrap();
            assert_eq!(rep.verdict, Verdict::Stable, "{:?}", rep);
        }
    }

    #[test]
    fn delay_free_limit() {
        let a0 = Matrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let a1 = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]) * 1e-8;
        let sys = TimeDelaySystem::new(vec![(0.0, a0), (0.1, a1)], None).unwrap();
        let rep = finite_criterion(&sys, Finite::Thm8, &Options::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Stable);
        assert!(rep.r_used < 50, "r = {}", rep.r_used);
    }

    #[test]
    fn memory_cap_is_enforced() {
        let sys = example2(1.25, 1.25);
        let opts = Options {
            mem_cap: Some(1000),
            ..Options::default()
        };
        match finite_criterion(&sys, Finite::Thm7, &opts) {
            Err(CriteriaError::MemoryBudget { cap, .. }) => assert_eq!(cap, 1000),
            other => panic!("expected a memory budget error, got {other:?}"),
        }
    }

    #[test]
    fn condition_failure_is_a_verdict() {
        // ẋ = x(t − h) − x(t): s = 0 is a root, and so is −s.
        let sys = scalar(-1.0, 1.0, 1.0);
        let rep = necessary_report(&sys, 3).unwrap();
        assert_eq!(rep.verdict, Verdict::LyapunovConditionFails);
    }

    #[test]
    fn hierarchy_on_example2() {
        for &(a, h) in &[(1.25, 0.5), (0.3, 1.0), (-0.5, 1.9), (-1.9, 1.2), (-1.0, 1.7)] {
            let u = LyapunovMatrix::build(&example2(a, h)).unwrap();
            for l in 1..=3 {
                let coarse = test_kr(&u, 1 << l, None).unwrap();
                let fine = test_kr(&u, 1 << (l + 1), None).unwrap();
                if coarse.class == DefinitenessClass::NotPositiveSemidefinite {
                    assert_eq!(fine.class, DefinitenessClass::NotPositiveSemidefinite, "({a},{h}) l={l}");
                }
            }
        }
    }

    #[test]
    fn stable_systems_stay_pd() {
        for &(a, h) in &[(-1.25, 0.5), (-0.8, 1.0)] {
            let u = LyapunovMatrix::build(&example2(a, h)).unwrap();
            for r in 2..=12 {
                assert!(test_kr(&u, r, None).unwrap().is_positive_definite(), "({a},{h}) r={r}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn lambda_min_p_is_negative(
            n in 1usize..4,
            m in 1usize..3,
            seed in proptest::collection::vec(-2.0f64..2.0, 48),
        ) {
            let mut it = seed.into_iter().cycle();
            let mut terms = Vec::new();
            for j in 0..=m {
                let a = Matrix::from_fn(n, n, |_, _| it.next().unwrap());
                terms.push((j as f64 * 0.5, a));
            }
            if terms[1..].iter().all(|(_, a)| a.amax() == 0.0) {
                terms[1].1[(0, 0)] = 1.0;
            }
            let sys = TimeDelaySystem::new(terms, None).unwrap();
            prop_assert!(lambda_min_p(&sys).unwrap() < 0.0);
        }
    }
}
