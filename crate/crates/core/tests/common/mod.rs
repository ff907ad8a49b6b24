#![allow(dead_code)]

use cbf_minnorm::model::{load_model_str, BarrierSpec, SystemModel};

pub const EXAMPLE1: &str = include_str!("../../specs/example1.json");
pub const EXAMPLE2: &str = include_str!("../../specs/example2.json");
pub const SINGLE_INTEGRATOR: &str = include_str!("../../specs/single_integrator.json");

pub fn example(i: usize) -> (SystemModel, BarrierSpec) {
    load_model_str(if i == 1 { EXAMPLE1 } else { EXAMPLE2 }).unwrap()
}

/// Hand-derived data for the two planar examples (f = (x2, 0), h = 1 - |x|^2,
/// alpha(r) = r): returns (h, N, Lg h) with g = (0, x2^p), p = 0 or 2.
pub fn planar_oracle(p: i32, x: [f64; 2]) -> (f64, f64, f64) {
    let h = 1.0 - x[0] * x[0] - x[1] * x[1];
    let n = -2.0 * x[0] * x[1] + h;
    let lg = -2.0 * x[1] * x[1].powi(p);
    (h, n, lg)
}

/// Minimizer of |u| subject to n + lg*u >= 0 by dense search over a
/// bracketing interval, independent of the closed form.
pub fn scalar_qp_oracle(n: f64, lg: f64) -> Option<f64> {
    if n >= 0.0 {
        return Some(0.0);
    }
    if lg == 0.0 {
        return None;
    }
    // Feasible half-line starts at the root -n/lg; bisect for it.
    let feasible = |u: f64| n + lg * u >= 0.0;
    let dir = lg.signum();
    let (mut lo, mut hi) = (0.0_f64, dir);
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}
