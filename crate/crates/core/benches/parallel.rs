//! One worker against the full pool on the two data-parallel hot paths: the
//! block Levinson test of a large `𝒦ᵣ` and a sweep over Example 2.
//!
//! Build with `--no-default-features` to time the sequential fallback itself.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use delaylyap::criteria::{self, Options, Selection};
use delaylyap::linalg::Matrix;
use delaylyap::sweep::{run_sweep, SweepOptions, SweepSpec};
use delaylyap::{par, LyapunovMatrix, TimeDelaySystem};

fn example2(a: f64, h: f64) -> TimeDelaySystem {
    let a1 = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, a]);
    TimeDelaySystem::new(vec![(h, a1)], None).unwrap()
}

const SWEEP: &str = r#"{
    "system": {"n": 2, "terms": [{"delay": 0.5, "A": [[-1.0, 0.5], [0.0, 0.0]]}]},
    "params": [
        {"name": "a", "min": -2.0, "max": 2.0, "steps": 8, "path": "/terms/0/A/1/1"},
        {"name": "h1", "min": 0.1, "max": 2.0, "steps": 8, "path": "/terms/0/delay"}
    ]
}"#;

fn workers() -> Vec<usize> {
    let all = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if all > 1 { vec![1, all] } else { vec![1] }
}

fn kr_test(c: &mut Criterion) {
    let u = LyapunovMatrix::build(&example2(-1.25, 0.5)).unwrap();
    let mut g = c.benchmark_group("kr_levinson_r2000");
    g.sample_size(10);
    for w in workers() {
        g.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, &w| {
            b.iter(|| par::with_workers(w, || black_box(criteria::test_kr(&u, 2000, None).unwrap())))
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let spec = SweepSpec::from_json(SWEEP).unwrap();
    let mut g = c.benchmark_group("sweep_8x8_necessary6");
    g.sample_size(10);
    for w in workers() {
        let opts = SweepOptions {
            selection: Selection::Necessary(6),
            criteria: Options::default(),
            oracle: false,
            workers: w,
        };
        g.bench_with_input(BenchmarkId::from_parameter(w), &opts, |b, o| {
            b.iter(|| black_box(run_sweep(&spec, o)))
        });
    }
    g.finish();
}

criterion_group!(benches, kr_test, sweep);
criterion_main!(benches);
