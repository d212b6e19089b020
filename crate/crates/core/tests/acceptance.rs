use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delaylyap::criteria::{self, Finite, Options, Selection, Verdict};
use delaylyap::functional::{self, build_psi, equidistant_taus, eval_v1, eval_z, DEFAULT_QUAD_PANELS};
use delaylyap::linalg::{Matrix, Vector};
use delaylyap::sweep::{run_sweep, SweepOptions, SweepSpec};
use delaylyap::{oracle, quad, FundamentalMatrix, LyapunovMatrix, TimeDelaySystem};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {id:>2} {tag} {name}: {detail}");
}

fn example2(a: f64, h: f64) -> TimeDelaySystem {
    let a1 = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, a]);
    TimeDelaySystem::new(vec![(h, a1)], None).unwrap()
}

fn scalar(terms: &[(f64, f64)]) -> TimeDelaySystem {
    TimeDelaySystem::merged(
        terms.iter().map(|&(h, a)| (h, Matrix::from_element(1, 1, a))).collect(),
        None,
    )
    .unwrap()
}

fn config(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(p).unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn c01_table_verdicts_and_r() {
    // (a, h1, expected verdict, r for the first finite criterion, r for the second)
    let rows = [
        (-1.25, 0.5, Verdict::Stable, 89u64, 14u64),
        (-1.25, 0.75, Verdict::Stable, 395, 45),
        (1.25, 0.5, Verdict::Unstable, 79, 13),
        (1.25, 1.25, Verdict::Unstable, 3416, 257),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, &(a, h, expect, r7, r8)) in rows.iter().enumerate() {
        let sys = example2(a, h);
        for (which, r_ref) in [(Finite::Thm7, r7), (Finite::Thm8, r8)] {
            let skippable = i == 3 && which == Finite::Thm7;
            let start = Instant::now();
            let res = criteria::finite_criterion(&sys, which, &Options::default());
            let secs = start.elapsed().as_secs_f64();
            let tag = format!("({a},{h}) {which:?}");
            match res {
                Ok(rep) => {
                    let ratio = rep.r_used as f64 / r_ref as f64;
                    let ok = rep.verdict == expect && (0.25..=4.0).contains(&ratio) && (i == 3 || secs <= 120.0);
                    pass &= ok;
                    notes.push(format!("{tag} {} r={} ref={r_ref} {secs:.1}s", rep.verdict, rep.r_used));
                }
                Err(e) if skippable => notes.push(format!("{tag} skipped ({e})")),
                Err(e) => {
                    pass = false;
                    let r = criteria::constants_for(&sys, &Options::default())
                        .map(|c| if which == Finite::Thm7 { c.r_thm7 } else { c.r_thm8 })
                        .unwrap_or(0);
                    notes.push(format!("{tag} r={r} ref={r_ref}: {e}"));
                }
            }
        }
    }
    report(1, "table verdicts within r factor 4", pass, &notes.join("; "));
    assert!(pass, "{}", notes.join("\n"));
}

fn agreement(rows: &[delaylyap::sweep::SweepRow]) -> (usize, usize) {
    let mut conv = 0;
    let mut agree = 0;
    for r in rows {
        let o = match r.oracle.as_deref() {
            Some("STABLE") => true,
            Some("UNSTABLE") => false,
            _ => continue,
        };
        conv += 1;
        if (r.verdict() == Some(Verdict::Stable)) == o {
            agree += 1;
        }
    }
    (conv, agree)
}

#[test]
fn c02_example2_region() {
    let spec = SweepSpec::from_json(&config("sweep_example2.json")).unwrap();
    assert_eq!(spec.params[0].values().len(), 41);
    assert_eq!(spec.params[1].values().len(), 40);
    let run = |r: usize| {
        run_sweep(
            &spec,
            &SweepOptions {
                selection: Selection::Necessary(r),
                criteria: Options::default(),
                oracle: true,
                workers: 4,
            },
        )
    };
    let six = run(6);
    let (conv, agree) = agreement(&six.rows);
    let frac = agree as f64 / conv.max(1) as f64;
    let three = run(3);
    let missed: Vec<(f64, f64)> = three
        .rows
        .iter()
        .filter(|r| r.oracle.as_deref() == Some("STABLE") && r.verdict() != Some(Verdict::Stable))
        .map(|r| (r.p1, r.p2))
        .collect();
    let pass = conv > 0 && frac >= 0.99 && missed.is_empty();
    let detail = format!(
        "r=6 agrees at {agree}/{conv} converged ({:.2}%), r=3 misses {} oracle-stable points",
        100.0 * frac,
        missed.len()
    );
    report(2, "example 2 stability map", pass, &detail);
    assert!(pass, "{detail} {missed:?}");
}

#[test]
fn c03_example1_map() {
    let spec = SweepSpec::from_json(&config("sweep_example1.json")).unwrap();
    let res = run_sweep(
        &spec,
        &SweepOptions {
            selection: Selection::Necessary(4),
            criteria: Options::default(),
            oracle: true,
            workers: 4,
        },
    );
    let (conv, agree) = agreement(&res.rows);
    let frac = agree as f64 / conv.max(1) as f64;
    let secs = res.wall_ms / 1e3;
    let pass = res.rows.len() == 441 && conv > 0 && frac >= 0.98 && secs <= 600.0;
    let detail = format!("{agree}/{conv} converged points agree ({:.2}%), {secs:.0}s", 100.0 * frac);
    report(3, "example 1 stability map", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c04_property_residuals() {
    let single = [example2(-1.25, 0.5), example2(1.25, 1.25), scalar(&[(0.0, -1.0), (1.0, -0.5)])];
    let multi = [
        scalar(&[(1.0, -0.2), (2.0, -0.1)]),
        TimeDelaySystem::new(
            vec![
                (0.0, Matrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.1, -1.0])),
                (0.4, Matrix::from_row_slice(2, 2, &[0.2, -0.5, 0.0, 0.3])),
                (1.2, Matrix::from_row_slice(2, 2, &[-0.1, 0.0, 0.4, -0.2])),
            ],
            None,
        )
        .unwrap(),
    ];
    let mut worst: f64 = 0.0;
    let mut cross: f64 = 0.0;
    let mut pass = true;
    for sys in single.iter() {
        let a = LyapunovMatrix::build_single_delay(sys).unwrap();
        let b = LyapunovMatrix::build_commensurate(sys).unwrap();
        for u in [&a, &b] {
            let res = u.check_properties(512);
            let scale = delaylyap::linalg::spectral_norm(sys.weight());
            worst = worst.max(res.max() / scale);
            pass &= res.max() <= 1e-8 * scale;
        }
        let h = sys.max_delay();
        for i in 0..=64 {
            let tau = h * i as f64 / 64.0;
            cross = cross.max((a.eval(tau) - b.eval(tau)).amax());
        }
    }
    for sys in multi.iter() {
        let u = LyapunovMatrix::build(sys).unwrap();
        let res = u.check_properties(512);
        let scale = delaylyap::linalg::spectral_norm(sys.weight());
        worst = worst.max(res.max() / scale);
        pass &= res.max() <= 1e-8 * scale;
    }
    pass &= cross <= 1e-10;
    let detail = format!("max residual/‖W‖ {worst:.2e}, single vs commensurate {cross:.2e}");
    report(4, "Lyapunov matrix properties", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c05_bilinear_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (a, h) in [(-1.25, 0.5), (1.25, 0.5)] {
        let sys = example2(a, h);
        let u = LyapunovMatrix::build(&sys).unwrap();
        let k = FundamentalMatrix::build_default(&sys).unwrap();
        for _ in 0..20 {
            let t1 = rng.random_range(0.0..h);
            let t2 = rng.random_range(0.0..h);
            let mu = random_vec(2, &mut rng);
            let eta = random_vec(2, &mut rng);
            let f = build_psi(&k, &[t1], &[mu.clone()]);
            let g = build_psi(&k, &[t2], &[eta.clone()]);
            let lhs = eval_z(&sys, &u, &f, &g, DEFAULT_QUAD_PANELS);
            let rhs = mu.dot(&(u.eval(t2 - t1) * &eta));
            worst = worst.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
        }
    }
    let pass = worst <= 1e-5;
    let detail = format!("worst relative error {worst:.2e} over 40 draws");
    report(5, "bilinear functional identity", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c06_quadratic_form_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for (a, h) in [(-1.25, 0.5), (1.25, 0.5)] {
        let sys = example2(a, h);
        let u = LyapunovMatrix::build(&sys).unwrap();
        let k = FundamentalMatrix::build_default(&sys).unwrap();
        for r in [2usize, 3, 5] {
            let gammas: Vec<Vector> = (0..r).map(|_| random_vec(2, &mut rng)).collect();
            let psi = build_psi(&k, &equidistant_taus(h, r), &gammas);
            let g = Vector::from_iterator(2 * r, gammas.iter().flat_map(|v| v.iter().copied()));
            let q = g.dot(&(criteria::assemble_kr(&u, r) * &g));
            let v = eval_v1(&sys, &u, &psi, DEFAULT_QUAD_PANELS);
            worst = worst.max((v - q).abs() / (1.0 + q.abs()));
        }
    }
    let pass = worst <= 1e-5;
    let detail = format!("worst relative error {worst:.2e}");
    report(6, "v1 of psi equals the block quadratic form", pass, &detail);
    assert!(pass, "{detail}");
}

/// `∫₀ᵀ Kᵀ(t) W K(t + τ) dt`.
fn integral_u(sys: &TimeDelaySystem, k: &FundamentalMatrix, t_end: f64, tau: f64) -> Matrix {
    let basic = k.basic_delay();
    let mut cuts = quad::lattice(0.0, t_end, basic, 0.0);
    cuts.extend(quad::lattice(0.0, t_end, basic, -tau));
    let n = sys.dim();
    let mut acc = Matrix::zeros(n, n);
    for (t, w) in quad::composite(0.0, t_end, &cuts, basic / 8.0) {
        acc += k.eval(t).transpose() * sys.weight() * k.eval(t + tau) * w;
    }
    acc
}

#[test]
fn c07_integral_representation() {
    let systems = [
        example2(-1.25, 0.5),
        scalar(&[(0.0, -1.0), (1.0, -0.5)]),
        scalar(&[(1.0, -0.2), (2.0, -0.1)]),
    ];
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for sys in &systems {
        let sigma = -oracle::converged_spectrum(sys, 1).unwrap().rightmost().unwrap().re;
        assert!(sigma > 0.0);
        let t_end = 60.0 / sigma;
        let h = sys.max_delay();
        let k = FundamentalMatrix::build(sys, t_end + h, h / 2048.0).unwrap();
        let u = LyapunovMatrix::build(sys).unwrap();
        let mut err: f64 = 0.0;
        for tau in [0.0, h / 3.0, h] {
            err = err.max((integral_u(sys, &k, t_end, tau) - u.eval(tau)).amax());
        }
        notes.push(format!("σ={sigma:.3} err={err:.1e}"));
        worst = worst.max(err);
    }
    let pass = worst <= 1e-5;
    report(7, "integral representation for stable systems", pass, &notes.join(", "));
    assert!(pass, "{notes:?}");
}

#[test]
fn c08_v1_lower_bound_on_s() {
    let mut pass = true;
    let mut notes = Vec::new();
    for (a, h) in [(-1.25, 0.5), (-1.25, 0.75)] {
        let sys = example2(a, h);
        let u = LyapunovMatrix::build(&sys).unwrap();
        let alpha0 = criteria::compute_alpha0_star(&sys).unwrap();
        let (m, _) = sys.norm_constants();
        let samples = functional::sample_s_set(&sys, 50, 8);
        pass &= samples.len() == 50;
        let mut lowest = f64::INFINITY;
        for phi in &samples {
            pass &= functional::in_s_set(phi.as_ref(), h, m);
            lowest = lowest.min(eval_v1(&sys, &u, phi.as_ref(), DEFAULT_QUAD_PANELS));
        }
        pass &= lowest >= alpha0 - 1e-6;
        notes.push(format!("({a},{h}) min v1={lowest:.4} α0*={alpha0:.4}"));
    }
    report(8, "v1 bounded below by alpha0* on S", pass, &notes.join(", "));
    assert!(pass, "{notes:?}");
}

#[test]
fn c09_b_solver() {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for ah in [0.01, 0.1, 1.0, 10.0, 100.0] {
        pass &= criteria::b_residual(ah, 0.0) < 0.0 && criteria::b_residual(ah, FRAC_PI_2) > 0.0;
        let b = criteria::solve_b(ah);
        let rel = criteria::b_residual(ah, b).abs() / (ah * ah);
        pass &= b > 0.0 && b < FRAC_PI_2 && rel <= 1e-13;
        worst = worst.max(rel);
    }
    let detail = format!("worst residual/(aH)² {worst:.2e}");
    report(9, "b equation solver", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c10_scalar_boundary() {
    let mut pass = true;
    let mut notes = Vec::new();
    for (h, expect) in [(1.55, true), (1.60, false)] {
        let sys = scalar(&[(h, -1.0)]);
        let o = oracle::is_stable_oracle(&sys).ok();
        let rep = criteria::run(&sys, Selection::Necessary(2), &Options::default()).unwrap();
        let crit = rep.verdict == Verdict::Stable;
        pass &= o == Some(expect) && crit == expect;
        notes.push(format!("h={h} criterion {} oracle {o:?}", rep.verdict));
    }
    report(10, "scalar boundary at pi/2", pass, &notes.join(", "));
    assert!(pass, "{notes:?}");
}
