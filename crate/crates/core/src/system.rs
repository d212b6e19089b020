//! The model `ẋ(t) = Σⱼ Aⱼ x(t − hⱼ)` and its scalar constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};

pub const DEFAULT_COMMENSURATION_TOL: f64 = 1e-9;

/// Largest denominator tried when searching for a basic delay.
const MAX_DENOMINATOR: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("term {index}: matrix is {rows}x{cols}, expected {n}x{n}")]
    NonSquare {
        index: usize,
        rows: usize,
        cols: usize,
        n: usize,
    },
    #[error("delay {delay} appears more than once")]
    DuplicateDelay { delay: f64 },
    #[error("every delayed matrix A_k (k >= 1) is zero, or there is no positive delay")]
    NoNontrivialDelayedMatrix,
    #[error("weight matrix W is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    WNotPd { min_eigenvalue: f64 },
    #[error("delay {delay} is negative or not finite")]
    InvalidDelay { delay: f64 },
    #[error("system has no terms")]
    Empty,
    #[error("non-finite matrix entry in term {index}")]
    NonFinite { index: usize },
    #[error("invalid system description: {0}")]
    Parse(String),
}

#[derive(Debug, Clone)]
pub struct Term {
    pub delay: f64,
    pub a: Matrix,
}

/// An ordered set of terms with `h₀ = 0 < h₁ < … < h_m = H` and a weight `W`.
///
/// Construction only checks structure (shapes, ordering, finiteness). The
/// standing assumptions of the theory are checked by [`TimeDelaySystem::validate`].
#[derive(Debug, Clone)]
pub struct TimeDelaySystem {
    n: usize,
    terms: Vec<Term>,
    w: Matrix,
}

impl TimeDelaySystem {
    /// Builds a system from `(delay, A)` pairs. A zero-delay term with
    /// `A₀ = 0` is inserted when absent. Unsorted delays are sorted; repeated
    /// delays are rejected. `W` defaults to the identity.
    pub fn new(terms: Vec<(f64, Matrix)>, w: Option<Matrix>) -> Result<Self, SystemError> {
        Self::build(terms, w, false)
    }

    /// Like [`TimeDelaySystem::new`] but repeated delays are merged by summing
    /// their matrices.
    pub fn merged(terms: Vec<(f64, Matrix)>, w: Option<Matrix>) -> Result<Self, SystemError> {
        Self::build(terms, w, true)
    }

    fn build(
        mut terms: Vec<(f64, Matrix)>,
        w: Option<Matrix>,
        merge: bool,
    ) -> Result<Self, SystemError> {
        if terms.is_empty() {
            return Err(SystemError::Empty);
        }
        let n = terms[0].1.nrows();
        for (index, (delay, a)) in terms.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(SystemError::NonSquare {
                    index,
                    rows: a.nrows(),
                    cols: a.ncols(),
                    n,
                });
            }
            if !delay.is_finite() || *delay < 0.0 {
                return Err(SystemError::InvalidDelay { delay: *delay });
            }
            if linalg::ensure_finite(a).is_err() {
                return Err(SystemError::NonFinite { index });
            }
        }
        if terms.windows(2).any(|p| p[0].0 > p[1].0) {
            log::warn!("delays were given out of order; sorting them");
            terms.sort_by(|x, y| x.0.total_cmp(&y.0));
        }
        let mut out: Vec<Term> = Vec::with_capacity(terms.len() + 1);
        for (delay, a) in terms {
            match out.last_mut() {
                Some(last) if last.delay == delay => {
                    if !merge {
                        return Err(SystemError::DuplicateDelay { delay });
                    }
                    log::warn!("merging repeated delay {delay}");
                    last.a += a;
                }
                _ => out.push(Term { delay, a }),
            }
        }
        if out[0].delay != 0.0 {
            out.insert(
                0,
                Term {
                    delay: 0.0,
                    a: Matrix::zeros(n, n),
                },
            );
        }
        let w = w.unwrap_or_else(|| Matrix::identity(n, n));
        if w.nrows() != n || w.ncols() != n {
            return Err(SystemError::NonSquare {
                index: usize::MAX,
                rows: w.nrows(),
                cols: w.ncols(),
                n,
            });
        }
        Ok(TimeDelaySystem { n, terms: out, w })
    }

    /// Checks the standing assumptions: a positive delay with a nonzero
    /// matrix, and `W` symmetric positive definite.
    pub fn validate(&self) -> Result<(), SystemError> {
        if self.terms.len() < 2 || self.terms[1..].iter().all(|t| t.a.iter().all(|&x| x == 0.0)) {
            return Err(SystemError::NoNontrivialDelayedMatrix);
        }
        let asym = (&self.w - self.w.transpose()).amax();
        let d = linalg::classify_definiteness(&self.w, None)
            .map_err(|_| SystemError::WNotPd { min_eigenvalue: f64::NAN })?;
        if asym > 1e-12 * self.w.amax().max(1.0) || !d.is_positive_definite() {
            return Err(SystemError::WNotPd {
                min_eigenvalue: d.min_eigenvalue,
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Terms sorted by delay; the first one has delay 0.
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of positive delays.
    pub fn delay_count(&self) -> usize {
        self.terms.len() - 1
    }

    pub fn max_delay(&self) -> f64 {
        self.terms.last().map(|t| t.delay).unwrap_or(0.0)
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    /// Same system with a different weight matrix.
    pub fn with_weight(&self, w: Matrix) -> Self {
        TimeDelaySystem {
            n: self.n,
            terms: self.terms.clone(),
            w,
        }
    }

    /// `M = Σⱼ‖Aⱼ‖` and `M₁ = Σⱼ hⱼ‖Aⱼ‖`.
    pub fn norm_constants(&self) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(m, m1), t| {
            let norm = linalg::spectral_norm(&t.a);
            (m + norm, m1 + t.delay * norm)
        })
    }

    /// Finds the largest `h` with every delay an integer multiple of it
    /// (within `rel_tol·H`). Returns `None` for incommensurate delays.
    pub fn commensurate(&self, rel_tol: f64) -> Option<Commensuration> {
        commensurate_delays(
            &self.terms.iter().map(|t| t.delay).collect::<Vec<_>>(),
            rel_tol,
        )
    }

    /// Parses the JSON description
    /// `{"n": 2, "terms": [{"delay": 0.5, "A": [[..],[..]]}], "W": [[..]]}`.
    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let spec: SystemSpec =
            serde_json::from_str(text).map_err(|e| SystemError::Parse(e.to_string()))?;
        spec.into_system()
    }

    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            n: Some(self.n),
            terms: self
                .terms
                .iter()
                .map(|t| TermSpec {
                    delay: t.delay,
                    a: rows_of(&t.a),
                })
                .collect(),
            w: Some(rows_of(&self.w)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Commensuration {
    pub basic_delay: f64,
    /// `kⱼ` with `hⱼ = kⱼ·h`, in the order of the system's terms.
    pub multipliers: Vec<usize>,
    pub exact: bool,
}

impl Commensuration {
    pub fn max_multiplier(&self) -> usize {
        self.multipliers.iter().copied().max().unwrap_or(0)
    }
}

pub fn commensurate_delays(delays: &[f64], rel_tol: f64) -> Option<Commensuration> {
    let h_max = delays.iter().cloned().fold(0.0, f64::max);
    if h_max <= 0.0 {
        return None;
    }
    let h_min = delays
        .iter()
        .cloned()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let band = rel_tol * h_max;
    for q in 1..=MAX_DENOMINATOR {
        let h = h_min / q as f64;
        let mut ks = Vec::with_capacity(delays.len());
        let mut ok = true;
        for &d in delays {
            let k = (d / h).round();
            if (d - k * h).abs() > band {
                ok = false;
                break;
            }
            ks.push(k as usize);
        }
        if ok {
            // Re-center h on the largest delay to avoid drift.
            let kmax = *ks.iter().max().unwrap();
            return Some(Commensuration {
                basic_delay: h_max / kmax as f64,
                multipliers: ks,
                exact: true,
            });
        }
    }
    None
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix, SystemError> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err(SystemError::Parse("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermSpec {
    pub delay: f64,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
}

/// Serialized form of a system; matrices are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub terms: Vec<TermSpec>,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
}

impl SystemSpec {
    pub fn into_system(self) -> Result<TimeDelaySystem, SystemError> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            terms.push((t.delay, matrix_from_rows(&t.a)?));
        }
        if let (Some(n), Some((_, a))) = (self.n, terms.first()) {
            if a.nrows() != n {
                return Err(SystemError::NonSquare {
                    index: 0,
                    rows: a.nrows(),
                    cols: a.ncols(),
                    n,
                });
            }
        }
        let w = self.w.as_deref().map(matrix_from_rows).transpose()?;
        TimeDelaySystem::merged(terms, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example2(a: f64, h: f64) -> TimeDelaySystem {
        let a1 = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, a]);
        TimeDelaySystem::new(vec![(0.0, Matrix::zeros(2, 2)), (h, a1)], None).unwrap()
    }

    fn scalar(terms: &[(f64, f64)]) -> TimeDelaySystem {
        TimeDelaySystem::new(
            terms
                .iter()
                .map(|&(h, a)| (h, Matrix::from_element(1, 1, a)))
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn example2_validates() {
        let s = example2(-1.25, 0.5);
        assert!(s.validate().is_ok());
        assert_eq!(s.max_delay(), 0.5);
        assert_eq!(s.delay_count(), 1);
    }

    #[test]
    fn all_delayed_zero_is_rejected() {
        let s = scalar(&[(0.0, -1.0), (1.0, 0.0)]);
        assert_eq!(s.validate(), Err(SystemError::NoNontrivialDelayedMatrix));
        let s = scalar(&[(0.0, -1.0)]);
        assert_eq!(s.validate(), Err(SystemError::NoNontrivialDelayedMatrix));
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let s = example2(-1.0, 1.0).with_weight(Matrix::from_diagonal(&nalgebra::dvector![1.0, -1.0]));
        assert!(matches!(s.validate(), Err(SystemError::WNotPd { .. })));
    }

    #[test]
    fn shape_and_duplicate_errors() {
        let r = TimeDelaySystem::new(
            vec![(0.0, Matrix::zeros(2, 2)), (1.0, Matrix::zeros(2, 3))],
            None,
        );
        assert!(matches!(r, Err(SystemError::NonSquare { .. })));
        let r = TimeDelaySystem::new(
            vec![(1.0, Matrix::identity(1, 1)), (1.0, Matrix::identity(1, 1))],
            None,
        );
        assert_eq!(r.unwrap_err(), SystemError::DuplicateDelay { delay: 1.0 });
        let s = TimeDelaySystem::merged(
            vec![(1.0, Matrix::identity(1, 1)), (1.0, Matrix::identity(1, 1))],
            None,
        )
        .unwrap();
        assert_eq!(s.terms()[1].a[(0, 0)], 2.0);
    }

    #[test]
    fn unsorted_terms_are_sorted_and_zero_delay_inserted() {
        let s = scalar(&[(2.0, 0.1), (1.0, 0.2)]);
        let d: Vec<f64> = s.terms().iter().map(|t| t.delay).collect();
        assert_eq!(d, vec![0.0, 1.0, 2.0]);
        assert_eq!(s.terms()[0].a[(0, 0)], 0.0);
    }

    #[test]
    fn commensuration_examples() {
        let c = scalar(&[(0.0, 0.0), (1.0, 1.0), (2.0, 1.0)]).commensurate(1e-9).unwrap();
        assert_eq!(c.basic_delay, 1.0);
        assert_eq!(c.multipliers, vec![0, 1, 2]);
        let c = scalar(&[(0.0, 0.0), (0.5, 1.0)]).commensurate(1e-9).unwrap();
        assert_eq!(c.basic_delay, 0.5);
        assert_eq!(c.multipliers, vec![0, 1]);
        let c = scalar(&[(0.0, 0.0), (1.0, 1.0), (2f64.sqrt(), 1.0)]).commensurate(1e-9);
        assert!(c.is_none());
        let c = scalar(&[(0.0, 0.0), (0.6, 1.0), (1.0, 1.0)]).commensurate(1e-9).unwrap();
        assert!((c.basic_delay - 0.2).abs() < 1e-15);
        assert_eq!(c.multipliers, vec![0, 3, 5]);
    }

    #[test]
    fn norm_constant_examples() {
        let (m, m1) = scalar(&[(0.0, 0.0), (1.0, 1.0)]).norm_constants();
        assert_eq!((m, m1), (1.0, 1.0));
        let (m, m1) = scalar(&[(0.0, -2.0), (2.0, 0.5)]).norm_constants();
        assert_eq!((m, m1), (2.5, 1.0));
        let (m, m1) = example2(-1.25, 0.5).norm_constants();
        // ‖A₁‖² is the largest root of λ² − 2.8125λ + 1.5625 = 0
        let s = (2.8125f64 + (2.8125f64.powi(2) - 4.0 * 1.5625).sqrt()) / 2.0;
        assert!((m - s.sqrt()).abs() < 1e-12);
        assert!((m1 - 0.5 * s.sqrt()).abs() < 1e-12);
        assert!((m - 1.432).abs() < 1e-3);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"n": 2, "terms": [{"delay": 0.5, "A": [[-1, 0.5], [0, -1.25]]}]}"#;
        let s = TimeDelaySystem::from_json(text).unwrap();
        assert_eq!(s.terms()[1].a[(0, 1)], 0.5);
        assert_eq!(s.weight(), &Matrix::identity(2, 2));
        let back = serde_json::to_string(&s.to_spec()).unwrap();
        let s2 = TimeDelaySystem::from_json(&back).unwrap();
        assert_eq!(s2.terms()[1].a, s.terms()[1].a);
        assert!(TimeDelaySystem::from_json("{\"terms\": [").is_err());
    }

    proptest! {
        #[test]
        fn norm_constants_ignore_order(
            vals in proptest::collection::vec(-3.0f64..3.0, 3),
            perm in 0usize..6,
        ) {
            let delays = [0.0, 0.7, 1.9];
            let mut terms: Vec<(f64, Matrix)> = delays
                .iter()
                .zip(&vals)
                .map(|(&h, &a)| (h, Matrix::from_element(1, 1, a)))
                .collect();
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let shuffled: Vec<_> = orders[perm].iter().map(|&i| terms[i].clone()).collect();
            let a = TimeDelaySystem::new(terms.drain(..).collect(), None).unwrap().norm_constants();
            let b = TimeDelaySystem::new(shuffled, None).unwrap().norm_constants();
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }

        #[test]
        fn commensuration_is_idempotent(h in 0.05f64..3.0, k1 in 1usize..6, k2 in 1usize..9) {
            let s = scalar(&[(0.0, 0.0), (k1 as f64 * h, 1.0), ((k1 + k2) as f64 * h, 1.0)]);
            let c = s.commensurate(1e-9).unwrap();
            let rebuilt: Vec<(f64, f64)> = c
                .multipliers
                .iter()
                .map(|&k| (k as f64 * c.basic_delay, 1.0))
                .collect();
            let c2 = scalar(&rebuilt).commensurate(1e-9).unwrap();
            prop_assert_eq!(c.multipliers, c2.multipliers);
        }
    }
}
