//! Two-parameter sweeps over a JSON system template.
//!
//! Each slot writes `scale·value + offset` into one or more JSON-pointer
//! locations of the template. Grid points run in parallel; rows come back in
//! `(param1 outer, param2 inner)` order regardless.

use std::io::Write;
use std::time::Instant;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::criteria::{self, Options, Selection, Verdict};
use crate::oracle::{self, OracleError};
use crate::par;
use crate::system::SystemSpec;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep description: {0}")]
    Parse(String),
    #[error("slot '{name}': {reason}")]
    Slot { name: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub path: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub steps: usize,
    /// Shorthand for a single target with unit scale.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub targets: Vec<Target>,
}

impl Slot {
    pub fn values(&self) -> Vec<f64> {
        let last = self.steps - 1;
        (0..self.steps)
            .map(|i| {
                if i == last {
                    self.max
                } else {
                    self.min + (self.max - self.min) * i as f64 / last as f64
                }
            })
            .collect()
    }

    fn all_targets(&self) -> Vec<Target> {
        let mut t = self.targets.clone();
        if let Some(p) = &self.path {
            t.push(Target {
                path: p.clone(),
                scale: 1.0,
                offset: 0.0,
            });
        }
        t
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub system: Value,
    pub params: [Slot; 2],
    #[serde(default)]
    pub criterion: Option<String>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self, SweepError> {
        let spec: SweepSpec = serde_json::from_str(text).map_err(|e| SweepError::Parse(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), SweepError> {
        for slot in &self.params {
            let fail = |reason: &str| SweepError::Slot {
                name: slot.name.clone(),
                reason: reason.into(),
            };
            if slot.steps < 2 {
                return Err(fail("steps must be at least 2"));
            }
            if !(slot.min.is_finite() && slot.max.is_finite()) {
                return Err(fail("bounds must be finite"));
            }
            let targets = slot.all_targets();
            if targets.is_empty() {
                return Err(fail("no target path"));
            }
            for t in targets {
                match self.system.pointer(&t.path) {
                    Some(Value::Number(_)) => {}
                    Some(_) => return Err(fail(&format!("'{}' does not point at a number", t.path))),
                    None => return Err(fail(&format!("'{}' does not resolve in the template", t.path))),
                }
            }
        }
        Ok(())
    }

    /// The template with both slots substituted.
    pub fn instantiate(&self, p1: f64, p2: f64) -> Result<Value, SweepError> {
        let mut v = self.system.clone();
        for (slot, x) in self.params.iter().zip([p1, p2]) {
            for t in slot.all_targets() {
                let target = v.pointer_mut(&t.path).ok_or_else(|| SweepError::Slot {
                    name: slot.name.clone(),
                    reason: format!("'{}' does not resolve", t.path),
                })?;
                let val = t.scale * x + t.offset;
                *target = serde_json::Number::from_f64(val)
                    .map(Value::Number)
                    .ok_or_else(|| SweepError::Slot {
                        name: slot.name.clone(),
                        reason: format!("non-finite value {val}"),
                    })?;
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub selection: Selection,
    pub criteria: Options,
    pub oracle: bool,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p1: f64,
    pub p2: f64,
    /// A [`Verdict`] name or `ERROR`.
    pub verdict: String,
    pub r_used: Option<u64>,
    pub min_eig: Option<f64>,
    pub oracle: Option<String>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn verdict(&self) -> Option<Verdict> {
        match self.verdict.as_str() {
            "STABLE" => Some(Verdict::Stable),
            "UNSTABLE" => Some(Verdict::Unstable),
            "LYAPUNOV_CONDITION_FAILS" => Some(Verdict::LyapunovConditionFails),
            "UNDECIDED_NUMERIC" => Some(Verdict::UndecidedNumeric),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub names: [String; 2],
    pub oracle: bool,
    pub rows: Vec<SweepRow>,
    pub wall_ms: f64,
}

/// Oracle verdict as a CSV token.
pub fn oracle_token(r: &Result<bool, OracleError>) -> &'static str {
    match r {
        Ok(true) => "STABLE",
        Ok(false) => "UNSTABLE",
        Err(OracleError::Undecided { .. }) => "UNDECIDED",
        Err(OracleError::NoConvergence { .. }) => "NO_CONVERGENCE",
    }
}

fn eval_point(spec: &SweepSpec, opts: &SweepOptions, p1: f64, p2: f64) -> SweepRow {
    let mut row = SweepRow {
        p1,
        p2,
        verdict: "ERROR".into(),
        r_used: None,
        min_eig: None,
        oracle: None,
        error: None,
    };
    let sys = spec
        .instantiate(p1, p2)
        .map_err(|e| e.to_string())
        .and_then(|v| serde_json::from_value::<SystemSpec>(v).map_err(|e| e.to_string()))
        .and_then(|s| s.into_system().map_err(|e| e.to_string()));
    let sys = match sys {
        Ok(s) => s,
        Err(e) => {
            log::warn!("({p1}, {p2}): {e}");
            row.error = Some(e);
            return row;
        }
    };
    if opts.oracle {
        row.oracle = Some(oracle_token(&oracle::is_stable_oracle(&sys)).into());
    }
    match criteria::run(&sys, opts.selection, &opts.criteria) {
        Ok(rep) => {
            row.verdict = rep.verdict.to_string();
            row.r_used = Some(rep.r_used);
            row.min_eig = rep.min_eigenvalue;
        }
        Err(e) => {
            log::warn!("({p1}, {p2}): {e}");
            row.error = Some(e.to_string());
        }
    }
    row
}

pub fn run_sweep(spec: &SweepSpec, opts: &SweepOptions) -> SweepResult {
    let start = Instant::now();
    let v1 = spec.params[0].values();
    let v2 = spec.params[1].values();
    let total = v1.len() * v2.len();
    let rows = par::with_workers(opts.workers, || {
        par::map_range(total, |idx| eval_point(spec, opts, v1[idx / v2.len()], v2[idx % v2.len()]))
    });
    SweepResult {
        names: [spec.params[0].name.clone(), spec.params[1].name.clone()],
        oracle: opts.oracle,
        rows,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// CSV body followed by a `# wall_ms=…` footer line.
pub fn write_csv<W: Write>(res: &SweepResult, mut out: W) -> Result<(), SweepError> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec![res.names[0].clone(), res.names[1].clone(), "verdict".into(), "r_used".into(), "min_eig".into()];
        if res.oracle {
            header.push("oracle_verdict".into());
        }
        w.write_record(&header)?;
        for r in &res.rows {
            let mut rec = vec![r.p1.to_string(), r.p2.to_string(), r.verdict.clone(), opt(&r.r_used), opt(&r.min_eig)];
            if res.oracle {
                rec.push(opt(&r.oracle));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    writeln!(out, "# wall_ms={:.3}", res.wall_ms)?;
    Ok(())
}
