//! Composite Gauss–Legendre quadrature that never straddles a breakpoint.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Points per panel.
pub const ORDER: usize = 8;

/// Nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

/// Nodes and weights of the composite rule on `[a, b]`: the interval is cut at
/// every breakpoint inside it, and each piece gets `ceil(len / max_panel)`
/// equal panels.
pub fn composite(a: f64, b: f64, breakpoints: &[f64], max_panel: f64) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = Vec::with_capacity(breakpoints.len() + 2);
    cuts.push(a);
    let eps = 1e-13 * (b - a).abs().max(1.0);
    cuts.extend(breakpoints.iter().copied().filter(|&x| x > a + eps && x < b - eps));
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|x, y| (*x - *y).abs() <= eps);
    let (xs, ws) = rule();
    let mut out = Vec::new();
    for piece in cuts.windows(2) {
        let (lo, hi) = (piece[0], piece[1]);
        let panels = ((hi - lo) / max_panel).ceil().max(1.0) as usize;
        let width = (hi - lo) / panels as f64;
        for p in 0..panels {
            let c = lo + (p as f64 + 0.5) * width;
            for (x, w) in xs.iter().zip(ws) {
                out.push((c + 0.5 * width * x, 0.5 * width * w));
            }
        }
    }
    out
}

/// Integer multiples of `step` strictly inside `(a, b)`, shifted by `offset`.
pub fn lattice(a: f64, b: f64, step: f64, offset: f64) -> Vec<f64> {
    if step <= 0.0 {
        return Vec::new();
    }
    let k0 = ((a - offset) / step).floor() as i64;
    let k1 = ((b - offset) / step).ceil() as i64;
    (k0..=k1)
        .map(|k| offset + k as f64 * step)
        .filter(|&x| x > a && x < b)
        .collect()
}
