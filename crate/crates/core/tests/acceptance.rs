//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and exits nonzero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cbf_minnorm::boundedness::{
    assemble_test_matrix, decide_boundedness, inevitability_check, ray_probe, Inevitability, VerdictKind,
};
use cbf_minnorm::controller::{evaluate_controller, sweep_grid, CellOutcome, Region};
use cbf_minnorm::expr::{eval_matrix, eval_vector, parse, Expr};
use cbf_minnorm::model::{load_model_str, AlphaSpec, BarrierSpec, SystemModel};
use cbf_minnorm::sim::{simulate_batch, EventKind, StepControl};
use cbf_minnorm::zset::{
    locate_zset, probe_weakness, verify_z_independence, StrengthClass, ZPoint, ZSearch, DEFAULT_COLLAR_SCALES,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{example, planar_oracle, EXAMPLE1, EXAMPLE2, SINGLE_INTEGRATOR};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn near(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn two_points_at_pm1(z: &[ZPoint], tol: f64) -> bool {
    z.len() == 2 && near(&z[0].x, &[-1.0, 0.0], tol) && near(&z[1].x, &[1.0, 0.0], tol)
}

fn c1_test_matrix() -> Check {
    let expected = [
        vec![vec![-2.0, 0.0], vec![-2.0, -2.0], vec![0.0, -2.0]],
        vec![vec![-2.0, 0.0], vec![-2.0, -2.0], vec![0.0, 0.0]],
    ];
    for (i, exp) in [1, 2].iter().zip(&expected) {
        let (m, b) = example(*i);
        let t = assemble_test_matrix(&m, &b, &[1.0, 0.0]).map_err(|e| e.to_string())?;
        ensure(t.alpha_prime0 == 1.0, || "alpha'(0) != 1".into())?;
        let a = t.matrix();
        let ok = a.len() == 3 && a.iter().zip(exp).all(|(r, e)| near(r, e, 1e-9));
        ensure(ok, || format!("example {i}: A = {a:?}, expected {exp:?}"))?;
    }
    Ok("A matches both displays within 1e-9".into())
}

fn c2_verdicts() -> Check {
    let mut certs = Vec::new();
    for x in [[1.0, 0.0], [-1.0, 0.0]] {
        let (m1, b1) = example(1);
        let v1 = decide_boundedness(&assemble_test_matrix(&m1, &b1, &x).map_err(|e| e.to_string())?);
        ensure(v1.kind == VerdictKind::Bounded, || format!("example 1 at {x:?}: {:?}", v1.kind))?;
        let (m2, b2) = example(2);
        let v2 = decide_boundedness(&assemble_test_matrix(&m2, &b2, &x).map_err(|e| e.to_string())?);
        ensure(v2.kind == VerdictKind::Unbounded, || format!("example 2 at {x:?}: {:?}", v2.kind))?;
        let v = v2.certificate.ok_or("no certificate")?;
        ensure(v[0].abs() < 1e-9, || format!("certificate {v:?} not along (0, ±1)"))?;
        certs.push(v);
    }
    Ok(format!("example 1 Bounded x2, example 2 Unbounded x2, v = {:?} / {:?}", certs[0], certs[1]))
}

fn c3_zset() -> Check {
    for i in [1, 2] {
        let (m, b) = example(i);
        let z = locate_zset(&m, &b, 64, 1e-10).map_err(|e| e.to_string())?;
        ensure(two_points_at_pm1(&z, 1e-6), || format!("example {i}: {z:?}"))?;
    }
    Ok("two clusters within 1e-6 of (±1, 0) for both examples".into())
}

fn c4_ray_laws() -> Check {
    let (m2, b2) = example(2);
    let r2 = ray_probe(&m2, &b2, &[1.0, 0.0], &[0.0, 1.0], 0.01, 12).map_err(|e| e.to_string())?;
    let e2 = r2.fitted_exponent.ok_or("example 2: no exponent")?;
    ensure((e2 + 2.0).abs() <= 0.1, || format!("example 2 exponent {e2}"))?;
    let (m1, b1) = example(1);
    let r1 = ray_probe(&m1, &b1, &[1.0, 0.0], &[0.0, 1.0], 0.01, 12).map_err(|e| e.to_string())?;
    let e1 = r1.fitted_exponent.ok_or("example 1: no exponent")?;
    ensure(e1.abs() <= 0.05, || format!("example 1 exponent {e1}"))?;
    let l1 = r1.limsup_estimate;
    ensure((1.0..=1.01).contains(&l1), || format!("example 1 limsup {l1}"))?;
    Ok(format!("exponents {e2:.4} / {e1:.5}, limsup {l1:.6}"))
}

fn rel_err(sym: &[f64], num: &[f64]) -> f64 {
    let diff = sym.iter().zip(num).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = sym.iter().map(|a| a.abs()).fold(1.0, f64::max);
    diff / scale
}

fn fd_gradient(e: &Expr, x: &[f64]) -> Vec<f64> {
    let s = 1e-6;
    (0..x.len())
        .map(|i| {
            let (mut p, mut q) = (x.to_vec(), x.to_vec());
            p[i] += s;
            q[i] -= s;
            (e.eval(&p).unwrap() - e.eval(&q).unwrap()) / (2.0 * s)
        })
        .collect()
}

fn fd_hessian(e: &Expr, x: &[f64]) -> Vec<f64> {
    let s = 1e-4;
    let n = x.len();
    let f = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut p = x.to_vec();
        p[di] += si;
        p[dj] += sj;
        e.eval(&p).unwrap()
    };
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            out.push((f(i, s, j, s) - f(i, s, j, -s) - f(i, -s, j, s) + f(i, -s, j, -s)) / (4.0 * s * s));
        }
    }
    out
}

fn c5_derivatives() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst1, mut worst2) = (0.0_f64, 0.0_f64);
    for text in [EXAMPLE1, EXAMPLE2, SINGLE_INTEGRATOR] {
        let (m, b) = load_model_str(text).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let x: Vec<f64> = b.domain_box().iter().map(|[lo, hi]| rng.random_range(*lo..*hi)).collect();
            let grad = eval_vector(b.gradient(), &x).unwrap();
            worst1 = worst1.max(rel_err(&grad, &fd_gradient(b.h(), &x)));
            let fields = std::iter::once((m.drift(), m.drift_jacobian()))
                .chain((0..m.m()).map(|i| (&m.inputs()[i], m.input_jacobian(i))));
            for (field, jac) in fields {
                let sym: Vec<f64> = eval_matrix(jac, &x).unwrap().concat();
                let num: Vec<f64> = field.components().iter().flat_map(|c| fd_gradient(c, &x)).collect();
                worst1 = worst1.max(rel_err(&sym, &num));
            }
            let hess: Vec<f64> = eval_matrix(b.hessian(), &x).unwrap().concat();
            worst2 = worst2.max(rel_err(&hess, &fd_hessian(b.h(), &x)));
        }
    }
    ensure(worst1 < 1e-6, || format!("first-order error {worst1:e}"))?;
    ensure(worst2 < 1e-4, || format!("second-order error {worst2:e}"))?;
    Ok(format!("max relative error {worst1:.1e} (first order), {worst2:.1e} (second order)"))
}

fn c6_safety_filter() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut summary = Vec::new();
    for (i, p) in [(1usize, 0), (2, 2)] {
        let (m, b) = example(i);
        let (mut states, mut active, mut worst) = (0, 0, f64::INFINITY);
        while states < 10_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (h, n, lg) = planar_oracle(p, x);
            if h < 0.0 {
                continue;
            }
            states += 1;
            let ev = evaluate_controller(&m, &b, &x).map_err(|e| format!("{x:?}: {e}"))?;
            let u = ev.u_star[0];
            let residual = n + lg * u;
            worst = worst.min(residual);
            ensure(residual >= -1e-9, || format!("example {i} at {x:?}: residual {residual:e}"))?;
            if u != 0.0 {
                active += 1;
                ensure(residual.abs() < 1e-9, || format!("example {i} at {x:?}: inactive, residual {residual:e}"))?;
            }
            // Feasible competitors u* + w with lgh·w ≥ 0.
            for _ in 0..100 {
                let w = rng.random_range(0.0..2.0) * if lg == 0.0 { rng.random_range(-1.0..1.0) } else { lg.signum() };
                let competitor = u + w;
                ensure(u.abs() <= competitor.abs() + 1e-12, || {
                    format!("example {i} at {x:?}: |u*| = {u} beaten by feasible {competitor}")
                })?;
            }
        }
        summary.push(format!("example {i}: {active} active, min residual {worst:.1e}"));
    }
    Ok(summary.join("; "))
}

fn c7_independence() -> Check {
    let (m, b) = example(1);
    let cubic = b.with_alpha(AlphaSpec::odd_cubic(2.0, 1.0)).map_err(|e| e.to_string())?;
    let r1 = verify_z_independence(&m, &b, &cubic, ZSearch::default(), 2000, 42).map_err(|e| e.to_string())?;
    let exp_h = parse("exp(1 - x1^2 - x2^2) - 1", 2).map_err(|e| e.to_string())?;
    let reshaped = BarrierSpec::new(exp_h, *b.alpha(), b.domain_box().to_vec()).map_err(|e| e.to_string())?;
    let r2 = verify_z_independence(&m, &b, &reshaped, ZSearch::default(), 2000, 42).map_err(|e| e.to_string())?;
    ensure(r1.passed && r2.passed, || {
        format!("hausdorff {:e} / {:e}", r1.hausdorff_distance, r2.hausdorff_distance)
    })?;
    ensure(two_points_at_pm1(&r1.z_second, 1e-6) && two_points_at_pm1(&r2.z_second, 1e-6), || {
        "reshaped barriers lost Z".into()
    })?;
    Ok(format!(
        "hausdorff {:.1e} (alpha), {:.1e} (exp(h) - 1)",
        r1.hausdorff_distance, r2.hausdorff_distance
    ))
}

fn c8_weakness() -> Check {
    let mut runs = 0;
    for i in [1, 2] {
        let (m, b) = example(i);
        for seed in [42, 7] {
            let r = probe_weakness(&m, &b, &DEFAULT_COLLAR_SCALES, 200, seed).map_err(|e| e.to_string())?;
            if seed == 42 {
                ensure(r.classification == StrengthClass::EvidenceWeak, || format!("example {i}: {:?}", r.classification))?;
                let near_z = |x: &[f64]| dist(x, &[1.0, 0.0]).min(dist(x, &[-1.0, 0.0]));
                let far = r.witnesses.iter().map(|w| near_z(&w.x)).fold(0.0, f64::max);
                ensure(far < 0.05, || format!("example {i}: witness {far} from (±1, 0)"))?;
                ensure(!r.loci.is_empty() && r.loci.iter().all(|l| near_z(l) < 1e-3), || {
                    format!("example {i}: loci {:?}", r.loci)
                })?;
            }
            if r.classification == StrengthClass::EvidenceWeak {
                runs += 1;
                let z = locate_zset(&m, &b, 64, 1e-10).map_err(|e| e.to_string())?;
                ensure(!z.is_empty(), || format!("example {i}, seed {seed}: weak but Z empty"))?;
            }
        }
    }
    Ok(format!("EvidenceWeak for both, Z nonempty in all {runs} weak runs"))
}

fn c9_invariance() -> Check {
    let (m, b) = example(1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut starts = Vec::new();
    while starts.len() < 20 {
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if planar_oracle(0, x).0 > 0.0 {
            starts.push(x.to_vec());
        }
    }
    let results = simulate_batch(&m, &b, &starts, 10.0, StepControl::Fixed(1e-3), None);
    let mut min_h = f64::INFINITY;
    for (x0, r) in starts.iter().zip(results) {
        let tr = r.map_err(|e| format!("{x0:?}: {e}"))?;
        min_h = min_h.min(tr.min_h());
        ensure(tr.min_h() >= -1e-6, || format!("{x0:?}: min h {:e}", tr.min_h()))?;
        ensure(tr.events_of(EventKind::SafetyViolated).count() == 0, || format!("{x0:?}: SafetyViolated"))?;
        let bad = tr.discrete_cbf_failures(b.alpha());
        ensure(bad.is_empty(), || format!("{x0:?}: discrete inequality fails at {} steps", bad.len()))?;
    }
    Ok(format!("20 trajectories, min h {min_h:.3e}"))
}

fn c10_inevitability() -> Check {
    let (m1, b1) = example(1);
    let (m2, b2) = example(2);
    let i1 = inevitability_check(&assemble_test_matrix(&m1, &b1, &[1.0, 0.0]).map_err(|e| e.to_string())?);
    let i2 = inevitability_check(&assemble_test_matrix(&m2, &b2, &[1.0, 0.0]).map_err(|e| e.to_string())?);
    ensure(i1 == Inevitability::NotDetermined, || format!("example 1: {i1:?}"))?;
    ensure(i2 == Inevitability::InevitablyUnbounded, || format!("example 2: {i2:?}"))?;
    Ok("example 2 InevitablyUnbounded, example 1 NotDetermined".into())
}

fn sweep_max(m: &SystemModel, b: &BarrierSpec, res: usize) -> Result<(Vec<f64>, f64), String> {
    let sweep = sweep_grid(m, b, res).map_err(|e| e.to_string())?;
    ensure(sweep.cells.len() == res * res, || "wrong cell count".into())?;
    ensure(
        !sweep.cells.iter().any(|c| matches!(c.outcome, CellOutcome::Violation { .. } | CellOutcome::Failed(_))),
        || "sweep has violations".into(),
    )?;
    let (cell, u) = sweep.max_u_norm_in_safe_set().ok_or("no cells in C")?;
    if let CellOutcome::Evaluated(ev) = &cell.outcome {
        ensure(ev.region != Region::Exterior, || "max outside C".into())?;
    }
    Ok((cell.x.clone(), u))
}

fn figure1_sweeps() -> Check {
    let spacing = 2.4 / 400.0;
    let (m2, b2) = example(2);
    let (x2, u2) = sweep_max(&m2, &b2, 401)?;
    let cheb = |z: [f64; 2]| (x2[0] - z[0]).abs().max((x2[1] - z[1]).abs());
    let d = cheb([1.0, 0.0]).min(cheb([-1.0, 0.0]));
    ensure(d <= spacing + 1e-12, || format!("example 2 max {u2:e} at {x2:?}, {d} from (±1, 0)"))?;

    let (m1, b1) = example(1);
    let (_, u1) = sweep_max(&m1, &b1, 401)?;
    // Fine-grid oracle from the closed form |u1*| = max(0, -N)/(2|x2|).
    let mut fine = 0.0_f64;
    let k = 2001;
    for i in 0..k {
        for j in 0..k {
            let x = [-1.2 + 2.4 * i as f64 / (k - 1) as f64, -1.2 + 2.4 * j as f64 / (k - 1) as f64];
            let (h, n, lg) = planar_oracle(0, x);
            if h >= 0.0 && n < 0.0 {
                fine = fine.max(-n / lg.abs());
            }
        }
    }
    ensure(u1 < 3.0 && fine < 3.0, || format!("example 1 max {u1} (grid), {fine} (oracle)"))?;
    Ok(format!("example 2 max {u2:.3e} at {x2:?}; example 1 max {u1:.4} (oracle {fine:.4})"))
}

struct Criterion {
    label: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { label: "1 test-matrix reproduction", limit: Duration::from_secs(1), run: c1_test_matrix },
        Criterion { label: "2 verdicts", limit: Duration::from_secs(1), run: c2_verdicts },
        Criterion { label: "3 Z location", limit: Duration::from_secs(5), run: c3_zset },
        Criterion { label: "4 ray-limit laws", limit: Duration::from_secs(1), run: c4_ray_laws },
        Criterion { label: "5 derivative oracle", limit: Duration::from_secs(5), run: c5_derivatives },
        Criterion { label: "6 safety-filter invariants", limit: Duration::from_secs(30), run: c6_safety_filter },
        Criterion { label: "7 Z independence", limit: Duration::from_secs(10), run: c7_independence },
        Criterion { label: "8 weakness consistency", limit: Duration::from_secs(10), run: c8_weakness },
        Criterion { label: "9 closed-loop invariance", limit: Duration::from_secs(60), run: c9_invariance },
        Criterion { label: "10 inevitability", limit: Duration::from_secs(1), run: c10_inevitability },
        Criterion { label: "F1 controller-magnitude sweeps", limit: Duration::from_secs(60), run: figure1_sweeps },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; too slow (limit {:?})", c.limit)),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] criterion {} ({:.3} s): {detail}", c.label, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
