//! The discontinuity set
//! `Z = {x ∈ ∂C : ∇h(x)f(x) = 0, ‖∇h(x)G(x)‖ = 0}` of the min-norm controller,
//! its independence from the choice of `α` and of `h`, and a sampling probe
//! for weak barrier functions.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::controller::{dot, norm, point_data};
use crate::error::{CbfError, Result};
use crate::expr::{eval_vector, Expr};
use crate::linalg::damped_least_squares_step;
use crate::model::{check_dims, BarrierSpec, SystemModel};

/// Each residual of a reported point must lie below this bound.
pub const ZPOINT_RESIDUAL_BOUND: f64 = 1e-8;
/// Minimum `‖∇h‖` at a boundary point.
pub const MIN_BOUNDARY_GRADIENT: f64 = 1e-6;
/// Witness test: no input helps when `‖∇h·G‖` is below this.
pub const WITNESS_LGH_TOL: f64 = 1e-9;
/// Witness test: the drift-plus-α term must be below minus this.
pub const WITNESS_N_TOL: f64 = 1e-12;

/// A point of the discontinuity set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZPoint {
    pub x: Vec<f64>,
    /// `[h, ∇h·f, ‖∇h·G‖]`
    pub residuals: [f64; 3],
    /// Number of multistart seeds whose refinement landed in this cluster.
    pub basin_count: usize,
}

/// Symbolic Lie derivatives `∇h·f`, `∇h·gᵢ` and their gradients.
pub(crate) struct LieDerivatives {
    pub lf: Expr,
    pub lg: Vec<Expr>,
    pub grad_lf: Vec<Expr>,
    pub grad_lg: Vec<Vec<Expr>>,
}

impl LieDerivatives {
    pub fn new(model: &SystemModel, barrier: &BarrierSpec) -> Self {
        let n = model.n();
        let grad_h = barrier.gradient();
        let lf = Expr::dot(grad_h, model.drift().components());
        let lg: Vec<Expr> = model
            .inputs()
            .iter()
            .map(|g| Expr::dot(grad_h, g.components()))
            .collect();
        LieDerivatives {
            grad_lf: lf.gradient(n),
            grad_lg: lg.iter().map(|e| e.gradient(n)).collect(),
            lf,
            lg,
        }
    }
}

type Residual = (Vec<f64>, Vec<Vec<f64>>);

struct LmOutcome {
    x: Vec<f64>,
    residual_norm: f64,
}

/// Levenberg–Marquardt on a stacked residual. Iterates past `tol` down to
/// `tol·1e-3` (or stagnation) so converged points from different seeds agree
/// well below the clustering radius.
fn levenberg_marquardt<F>(eval: F, x0: Vec<f64>, tol: f64, max_iter: usize) -> Option<LmOutcome>
where
    F: Fn(&[f64]) -> Option<Residual>,
{
    let mut x = x0;
    let (mut r, mut jac) = eval(&x)?;
    let mut rn = norm(&r);
    let mut lambda = 1e-6;
    for _ in 0..max_iter {
        if rn < tol * 1e-3 {
            break;
        }
        let Some(step) = damped_least_squares_step(&jac, &r, lambda) else {
            lambda *= 10.0;
            continue;
        };
        let trial: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + d).collect();
        match eval(&trial) {
            Some((r_new, jac_new)) if norm(&r_new) < rn => {
                let small_step = norm(&step) <= 1e-16 * (1.0 + norm(&x));
                x = trial;
                r = r_new;
                jac = jac_new;
                rn = norm(&r);
                lambda = (lambda / 3.0).max(1e-15);
                if small_step {
                    break;
                }
            }
            _ => {
                lambda *= 4.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
    }
    Some(LmOutcome { x, residual_norm: rn })
}

fn in_box(barrier: &BarrierSpec, x: &[f64], slack: f64) -> bool {
    barrier
        .domain_box()
        .iter()
        .zip(x)
        .all(|([lo, hi], v)| *v >= lo - slack && *v <= hi + slack)
}

/// Boundary points of the safe set found by bisection of `h` along
/// axis-parallel lines through the domain box. The line grid is refined
/// until at least `count` crossings are found (or a density cap is hit), then
/// thinned evenly to `count`.
pub fn boundary_seeds(barrier: &BarrierSpec, count: usize) -> Vec<Vec<f64>> {
    let n = barrier.n();
    // Two crossings per line are typical for a bounded safe set.
    let mut lines_per_axis = if n == 1 {
        1
    } else {
        let target = (count as f64 / (2.0 * n as f64)).max(1.0);
        (target.powf(1.0 / (n - 1) as f64).floor() as usize).max(1)
    };
    let cap = 4 * lines_per_axis + 4;
    let mut seeds = line_crossings(barrier, lines_per_axis);
    while n > 1 && seeds.len() < count && lines_per_axis < cap {
        lines_per_axis += 1;
        seeds = line_crossings(barrier, lines_per_axis);
    }
    if seeds.len() > count && count > 0 {
        let stride = seeds.len() as f64 / count as f64;
        seeds = (0..count)
            .map(|i| seeds[(i as f64 * stride) as usize].clone())
            .collect();
    }
    seeds
}

fn line_crossings(barrier: &BarrierSpec, lines_per_axis: usize) -> Vec<Vec<f64>> {
    const LINE_SAMPLES: usize = 128;
    let n = barrier.n();
    let bounds = barrier.domain_box();
    let h = |x: &[f64]| barrier.h().eval(x).ok();
    let mut seeds = Vec::new();
    for axis in 0..n {
        let others: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
        let total_lines = lines_per_axis.pow(others.len() as u32);
        for line in 0..total_lines {
            let mut base = vec![0.0; n];
            let mut rest = line;
            for &o in &others {
                let k = rest % lines_per_axis;
                rest /= lines_per_axis;
                let [lo, hi] = bounds[o];
                base[o] = lo + (hi - lo) * (k as f64 + 0.5) / lines_per_axis as f64;
            }
            let [lo, hi] = bounds[axis];
            let at = |t: f64| {
                let mut p = base.clone();
                p[axis] = t;
                p
            };
            let ts: Vec<f64> = (0..LINE_SAMPLES)
                .map(|i| lo + (hi - lo) * i as f64 / (LINE_SAMPLES - 1) as f64)
                .collect();
            for w in ts.windows(2) {
                let (Some(ha), Some(hb)) = (h(&at(w[0])), h(&at(w[1]))) else {
                    continue;
                };
                if (ha >= 0.0) == (hb >= 0.0) {
                    continue;
                }
                let (mut a, mut b, a_inside) = (w[0], w[1], ha >= 0.0);
                for _ in 0..80 {
                    let mid = 0.5 * (a + b);
                    match h(&at(mid)) {
                        Some(v) if (v >= 0.0) == a_inside => a = mid,
                        Some(_) => b = mid,
                        None => break,
                    }
                }
                seeds.push(at(0.5 * (a + b)));
            }
        }
    }
    seeds
}

fn z_residual(barrier: &BarrierSpec, lie: &LieDerivatives, x: &[f64]) -> Option<Residual> {
    let mut r = vec![barrier.h().eval(x).ok()?, lie.lf.eval(x).ok()?];
    let mut jac = vec![eval_vector(barrier.gradient(), x).ok()?, eval_vector(&lie.grad_lf, x).ok()?];
    for (lg, grad) in lie.lg.iter().zip(&lie.grad_lg) {
        r.push(lg.eval(x).ok()?);
        jac.push(eval_vector(grad, x).ok()?);
    }
    Some((r, jac))
}

/// Residuals `[h, ∇h·f, ‖∇h·G‖]` at `x`, evaluated from scratch.
pub fn z_residuals(model: &SystemModel, barrier: &BarrierSpec, x: &[f64]) -> Result<[f64; 3]> {
    let d = point_data(model, barrier, x)?;
    Ok([d.h, d.lf, d.lgh_norm()])
}

/// Locate the discontinuity set by multistart Gauss–Newton (Levenberg
/// damped) refinement of `(h, ∇h·f, ∇h·g₁, …, ∇h·g_m)` from boundary seeds.
///
/// Converged points are clustered with radius `10·tolerance`; an empty result
/// means nothing was found at this seeding density.
pub fn locate_zset(
    model: &SystemModel,
    barrier: &BarrierSpec,
    seeds: usize,
    tolerance: f64,
) -> Result<Vec<ZPoint>> {
    check_dims(model, barrier, &vec![0.0; barrier.n()])?;
    if seeds == 0 {
        return Err(CbfError::InvalidArgument("at least one seed is required".into()));
    }
    if !(tolerance > 0.0 && tolerance <= 1e-4) {
        return Err(CbfError::InvalidArgument(format!(
            "tolerance must lie in (0, 1e-4], got {tolerance}"
        )));
    }
    let lie = LieDerivatives::new(model, barrier);
    let starts = boundary_seeds(barrier, seeds);
    let converged: Vec<(Vec<f64>, f64)> = starts
        .into_par_iter()
        .filter_map(|x0| {
            let out = levenberg_marquardt(|x| z_residual(barrier, &lie, x), x0, tolerance, 200)?;
            (out.residual_norm < tolerance).then_some((out.x, out.residual_norm))
        })
        .collect();

    let radius = 10.0 * tolerance;
    // (representative, its residual norm, members)
    let mut clusters: Vec<(Vec<f64>, f64, usize)> = Vec::new();
    for (x, rn) in converged {
        if !in_box(barrier, &x, 1e-9) {
            continue;
        }
        match clusters
            .iter_mut()
            .find(|(rep, _, _)| distance(rep, &x) < radius)
        {
            Some(cluster) => {
                cluster.2 += 1;
                if rn < cluster.1 {
                    cluster.0 = x;
                    cluster.1 = rn;
                }
            }
            None => clusters.push((x, rn, 1)),
        }
    }

    let mut points = Vec::with_capacity(clusters.len());
    for (x, _, basin_count) in clusters {
        let residuals = z_residuals(model, barrier, &x)?;
        let grad = eval_vector(barrier.gradient(), &x).map_err(|e| CbfError::eval(&x, e))?;
        if norm(&grad) <= MIN_BOUNDARY_GRADIENT {
            log::warn!("dropping {x:?}: ∇h vanishes on the boundary there");
            continue;
        }
        points.push(ZPoint {
            x,
            residuals,
            basin_count,
        });
    }
    points.sort_by(|a, b| {
        a.x.iter()
            .zip(&b.x)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(points)
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Hausdorff distance between two finite point sets (0 if both are empty,
/// infinite if exactly one is).
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let directed = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        p.iter()
            .map(|x| q.iter().map(|y| distance(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

#[derive(Debug, Clone, Serialize)]
pub struct ZIndependenceReport {
    pub z_first: Vec<ZPoint>,
    pub z_second: Vec<ZPoint>,
    pub hausdorff_distance: f64,
    pub passed: bool,
}

/// Pass threshold on the Hausdorff distance between the two located sets.
pub const Z_INDEPENDENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct ZSearch {
    pub seeds: usize,
    pub tolerance: f64,
}

impl Default for ZSearch {
    fn default() -> Self {
        ZSearch {
            seeds: 64,
            tolerance: 1e-10,
        }
    }
}

/// Check that two barrier descriptions of the same safe set produce the same
/// discontinuity set. The shared-safe-set claim is spot-checked on
/// `sign_samples` uniform states of the first barrier's domain box.
pub fn verify_z_independence(
    model: &SystemModel,
    first: &BarrierSpec,
    second: &BarrierSpec,
    search: ZSearch,
    sign_samples: usize,
    rng_seed: u64,
) -> Result<ZIndependenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = vec![0.0; first.n()];
    for _ in 0..sign_samples {
        for (xi, [lo, hi]) in x.iter_mut().zip(first.domain_box()) {
            *xi = rng.random_range(*lo..*hi);
        }
        let (Ok(h1), Ok(h2)) = (first.h().eval(&x), second.h().eval(&x)) else {
            continue;
        };
        if h1.abs() > 1e-6 && h1 * h2 < 0.0 {
            return Err(CbfError::SignDisagreement { x, h1, h2 });
        }
    }
    let z_first = locate_zset(model, first, search.seeds, search.tolerance)?;
    let z_second = locate_zset(model, second, search.seeds, search.tolerance)?;
    let pts = |z: &[ZPoint]| z.iter().map(|p| p.x.clone()).collect::<Vec<_>>();
    let d = hausdorff(&pts(&z_first), &pts(&z_second));
    Ok(ZIndependenceReport {
        z_first,
        z_second,
        hausdorff_distance: d,
        passed: d < Z_INDEPENDENCE_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StrengthClass {
    EvidenceWeak,
    NoWeakEvidenceFound,
}

/// An exterior state at which no input satisfies the CBF inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub scale: f64,
    pub h: f64,
    #[serde(rename = "N")]
    pub n_value: f64,
    pub lgh_norm: f64,
    /// Nearest boundary point, reached by Newton steps along `∇h`.
    pub foot: Vec<f64>,
}

/// Heuristic evidence about whether `h` is a weak CBF. Sampling can never
/// certify strength, so the negative outcome is "no evidence found".
#[derive(Debug, Clone, Serialize)]
pub struct StrengthReport {
    pub classification: StrengthClass,
    pub witnesses: Vec<Witness>,
    #[serde(rename = "scales")]
    pub collar_scales: Vec<f64>,
    /// Boundary points near which witnesses were found at every scale.
    pub loci: Vec<Vec<f64>>,
}

fn project_to_boundary(barrier: &BarrierSpec, x: &[f64]) -> Option<Vec<f64>> {
    let mut p = x.to_vec();
    for _ in 0..50 {
        let h = barrier.h().eval(&p).ok()?;
        if h.abs() < 1e-14 {
            break;
        }
        let g = eval_vector(barrier.gradient(), &p).ok()?;
        let g2 = dot(&g, &g);
        if g2 == 0.0 {
            return None;
        }
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= h * gi / g2;
        }
    }
    Some(p)
}

/// Probe collars `-s < h < 0` outside the safe set for states where the CBF
/// inequality cannot be satisfied by any input.
///
/// Each sample starts from a random boundary point, picks a random target
/// level `h = -ρ·s` with `ρ ∈ [0.1, 1)`, and is refined by damped
/// Gauss–Newton onto `{h = -ρ·s, ∇h·G = 0}`; the refined state is kept only if
/// it lies in the collar. Classification is `EvidenceWeak` when, for some
/// boundary point `p`, every scale `s` has a witness whose foot point lies
/// within `10·s` of `p`.
pub fn probe_weakness(
    model: &SystemModel,
    barrier: &BarrierSpec,
    collar_scales: &[f64],
    samples_per_scale: usize,
    rng_seed: u64,
) -> Result<StrengthReport> {
    check_dims(model, barrier, &vec![0.0; barrier.n()])?;
    if collar_scales.is_empty()
        || collar_scales.iter().any(|s| !(*s > 0.0 && s.is_finite()))
        || collar_scales.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(CbfError::InvalidArgument(
            "collar scales must be positive and strictly decreasing".into(),
        ));
    }
    let lie = LieDerivatives::new(model, barrier);
    let pool = boundary_seeds(barrier, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut witnesses = Vec::new();
    if !pool.is_empty() {
        for &scale in collar_scales {
            let jobs: Vec<(Vec<f64>, f64)> = (0..samples_per_scale)
                .map(|_| {
                    let p = &pool[rng.random_range(0..pool.len())];
                    (p.clone(), -scale * rng.random_range(0.1..1.0))
                })
                .collect();
            let found: Vec<Witness> = jobs
                .into_par_iter()
                .filter_map(|(start, level)| {
                    let residual = |x: &[f64]| {
                        let mut r = vec![barrier.h().eval(x).ok()? - level];
                        let mut jac = vec![eval_vector(barrier.gradient(), x).ok()?];
                        for (lg, grad) in lie.lg.iter().zip(&lie.grad_lg) {
                            r.push(lg.eval(x).ok()?);
                            jac.push(eval_vector(grad, x).ok()?);
                        }
                        Some((r, jac))
                    };
                    let out = levenberg_marquardt(residual, start, 1e-12, 200)?;
                    let x = out.x;
                    if !in_box(barrier, &x, 0.0) {
                        return None;
                    }
                    let d = point_data(model, barrier, &x).ok()?;
                    let lgh_norm = d.lgh_norm();
                    let in_collar = d.h < 0.0 && d.h > -scale;
                    (in_collar && lgh_norm <= WITNESS_LGH_TOL && d.n_value < -WITNESS_N_TOL).then(|| {
                        Witness {
                            foot: project_to_boundary(barrier, &x).unwrap_or_else(|| x.clone()),
                            x,
                            scale,
                            h: d.h,
                            n_value: d.n_value,
                            lgh_norm,
                        }
                    })
                })
                .collect();
            witnesses.extend(found);
        }
    }

    let smallest = *collar_scales.last().expect("nonempty");
    let mut loci: Vec<Vec<f64>> = Vec::new();
    for w in witnesses.iter().filter(|w| w.scale == smallest) {
        if loci.iter().any(|c| distance(c, &w.foot) < 10.0 * smallest) {
            continue;
        }
        let every_scale = collar_scales.iter().all(|&s| {
            witnesses
                .iter()
                .any(|v| v.scale == s && distance(&v.foot, &w.foot) < 10.0 * s)
        });
        if every_scale {
            loci.push(w.foot.clone());
        }
    }
    Ok(StrengthReport {
        classification: if loci.is_empty() {
            StrengthClass::NoWeakEvidenceFound
        } else {
            StrengthClass::EvidenceWeak
        },
        witnesses,
        collar_scales: collar_scales.to_vec(),
        loci,
    })
}

/// Default collar scales for [`probe_weakness`].
pub const DEFAULT_COLLAR_SCALES: [f64; 3] = [1e-2, 1e-3, 1e-4];
