use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use delaylyap::criteria::{self, CriteriaError, Options, Selection, Verdict};
use delaylyap::lyapmat::{LyapmatError, LyapunovMatrix};
use delaylyap::oracle;
use delaylyap::sweep::{self, SweepOptions, SweepSpec};
use delaylyap::TimeDelaySystem;

const EXIT_STABLE: u8 = 0;
const EXIT_INPUT: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_UNSTABLE: u8 = 10;
const EXIT_CONDITION: u8 = 20;
const EXIT_UNDECIDED: u8 = 30;

/// Stability of linear time-delay systems via the delay Lyapunov matrix.
///
/// Exit codes for `check`: 0 stable, 10 unstable, 20 Lyapunov condition
/// fails, 30 undecided, 1 input error, 2 runtime failure (for instance the
/// n·r memory cap, see DELAYLYAP_MEM_CAP).
#[derive(Parser)]
#[command(name = "delaylyap", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide stability of one system and print a JSON report.
    Check {
        config: PathBuf,
        #[command(flatten)]
        crit: CriterionArgs,
        /// Attach the spectral oracle verdict and rightmost root.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a two-parameter grid and write CSV.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        crit: CriterionArgs,
        #[arg(long)]
        oracle: bool,
        /// Worker threads (default: available parallelism).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump U(τ) on [0, H] with property residuals as CSV.
    Lyapmat {
        config: PathBuf,
        #[arg(long, default_value_t = 65)]
        tau_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CriterionArgs {
    /// necessary:R, thm7 or thm8.
    #[arg(long)]
    criterion: Option<Selection>,
    /// r for the necessary test, or a forced r for thm7/thm8.
    #[arg(long)]
    r: Option<u64>,
    /// Upper bound on the real parts of the characteristic roots.
    #[arg(long)]
    a_bound: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    alpha0_frac: f64,
    /// Integration step for the fundamental matrix.
    #[arg(long)]
    step: Option<f64>,
}

impl CriterionArgs {
    fn resolve(&self, fallback: Selection) -> Result<(Selection, Options), String> {
        let mut sel = self.criterion.unwrap_or(fallback);
        let mut opts = Options {
            a_bound: self.a_bound,
            alpha0_frac: self.alpha0_frac,
            step: self.step,
            ..Options::default()
        };
        if let Some(r) = self.r {
            if r == 0 {
                return Err("--r must be positive".into());
            }
            match sel {
                Selection::Necessary(_) => sel = Selection::Necessary(r as usize),
                Selection::Finite(_) => opts.r_override = Some(r),
            }
        }
        if !(opts.alpha0_frac > 0.0 && opts.alpha0_frac < 1.0) {
            return Err("--alpha0-frac must lie in (0, 1)".into());
        }
        if let Some(a) = opts.a_bound {
            if !(a > 0.0 && a.is_finite()) {
                return Err("--a-bound must be positive".into());
            }
        }
        Ok((sel, opts))
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn load_system(path: &Path) -> Result<TimeDelaySystem, Failure> {
    let sys = TimeDelaySystem::from_json(&read(path)?).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    sys.validate().map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    Ok(sys)
}

fn emit(out: Option<&Path>, text: &[u8]) -> Result<(), Failure> {
    let res = match out {
        Some(p) => fs::write(p, text),
        None => io::stdout().lock().write_all(text),
    };
    res.map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("write failed: {e}"),
    })
}

fn criteria_failure(e: CriteriaError) -> Failure {
    let code = match e {
        CriteriaError::Lyapmat(LyapmatError::System(_) | LyapmatError::Incommensurate)
        | CriteriaError::InvalidArgument(_) => EXIT_INPUT,
        _ => EXIT_RUNTIME,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn oracle_json(sys: &TimeDelaySystem) -> Value {
    let verdict = oracle::is_stable_oracle(sys);
    let mut v = json!({ "verdict": sweep::oracle_token(&verdict) });
    if let Ok(est) = oracle::converged_spectrum(sys, 1) {
        if let Some(s) = est.rightmost() {
            v["rightmost"] = json!([s.re, s.im]);
        }
        v["residual"] = json!(est.residual);
        v["converged"] = json!(est.converged);
        v["n"] = json!(est.n);
    }
    v
}

fn cmd_check(config: &Path, crit: &CriterionArgs, with_oracle: bool, out: Option<&Path>) -> Result<u8, Failure> {
    let sys = load_system(config)?;
    let (sel, opts) = crit.resolve(Selection::Finite(criteria::Finite::Thm8)).map_err(input_error)?;
    let report = criteria::run(&sys, sel, &opts).map_err(criteria_failure)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    if with_oracle {
        value["oracle"] = oracle_json(&sys);
    }
    let mut text = serde_json::to_vec_pretty(&value).expect("report serializes");
    text.push(b'\n');
    emit(out, &text)?;
    Ok(match report.verdict {
        Verdict::Stable => EXIT_STABLE,
        Verdict::Unstable => EXIT_UNSTABLE,
        Verdict::LyapunovConditionFails => EXIT_CONDITION,
        Verdict::UndecidedNumeric => EXIT_UNDECIDED,
    })
}

fn cmd_sweep(
    path: &Path,
    crit: &CriterionArgs,
    with_oracle: bool,
    workers: usize,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let spec = SweepSpec::from_json(&read(path)?).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let fallback = match &spec.criterion {
        Some(c) => c.parse::<Selection>().map_err(input_error)?,
        None => Selection::Finite(criteria::Finite::Thm8),
    };
    let (selection, opts) = crit.resolve(fallback).map_err(input_error)?;
    let res = sweep::run_sweep(
        &spec,
        &SweepOptions {
            selection,
            criteria: opts,
            oracle: with_oracle,
            workers,
        },
    );
    let mut buf = Vec::new();
    sweep::write_csv(&res, &mut buf).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    emit(out, &buf)?;
    Ok(EXIT_STABLE)
}

fn cmd_lyapmat(config: &Path, samples: usize, out: Option<&Path>) -> Result<u8, Failure> {
    let sys = load_system(config)?;
    if samples == 0 {
        return Err(input_error("--tau-samples must be positive"));
    }
    let u = match LyapunovMatrix::build(&sys) {
        Ok(u) => u,
        Err(LyapmatError::LyapunovConditionFails { sigma_rel }) => {
            return Err(Failure {
                code: EXIT_CONDITION,
                message: format!("Lyapunov condition fails (relative smallest singular value {sigma_rel:e})"),
            })
        }
        Err(e) => return Err(criteria_failure(e.into())),
    };
    let n = sys.dim();
    let h = u.max_delay();
    let mut text = String::from("tau");
    // column-stacking order
    for c in 1..=n {
        for r in 1..=n {
            text.push_str(&format!(",u{r}_{c}"));
        }
    }
    text.push_str(",dynamic_residual,symmetry_residual\n");
    for i in 0..samples {
        let tau = if samples == 1 {
            0.0
        } else if i == samples - 1 {
            h
        } else {
            h * i as f64 / (samples - 1) as f64
        };
        let m = u.eval(tau);
        let (dynamic, symmetry) = u.pointwise_residuals(tau);
        text.push_str(&tau.to_string());
        for v in m.iter() {
            text.push_str(&format!(",{v:e}"));
        }
        text.push_str(&format!(",{dynamic:e},{symmetry:e}\n"));
    }
    let res = u.check_properties(512);
    text.push_str(&format!(
        "# algebraic_residual={:e} continuity_residual={:e}\n",
        res.algebraic, res.continuity
    ));
    emit(out, text.as_bytes())?;
    Ok(EXIT_STABLE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { EXIT_STABLE });
        }
    };
    let result = match &cli.cmd {
        Command::Check {
            config,
            crit,
            oracle,
            out,
        } => cmd_check(config, crit, *oracle, out.as_deref()),
        Command::Sweep {
            spec,
            crit,
            oracle,
            workers,
            out,
        } => cmd_sweep(spec, crit, *oracle, *workers, out.as_deref()),
        Command::Lyapmat {
            config,
            tau_samples,
            out,
        } => cmd_lyapmat(config, *tau_samples, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
