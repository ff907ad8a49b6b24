//! Boundedness of the min-norm controller at a discontinuity point `x̄`.
//!
//! The test matrix stacks `∇h(x̄)`, `β_f(x̄) = H_h f + (J_fᵀ + α'(0) I)∇hᵀ`
//! and `β_gᵢ(x̄) = H_h gᵢ + J_gᵢᵀ ∇hᵀ`. Directions `v` with `β_Gᵀ v = 0`,
//! `∇h·v ≥ 0` and `β_f·v < 0` certify that `u*(x̄ + vt)` blows up as
//! `t → 0⁺`; if no nonzero `v` has `∇h·v ≥ 0` and `β_f·v ≤ 0`, the controller
//! stays bounded. The two half-spaces are intersected with `ker β_Gᵀ` and the
//! question is decided in closed form on the kernel coordinates.

use serde::Serialize;

use crate::controller::{dot, norm, point_data};
use crate::error::{CbfError, Result};
use crate::expr::{eval_matrix, eval_vector};
use crate::linalg::{mat_t_vec, mat_vec, null_space, rank};
use crate::model::{check_dims, BarrierSpec, SystemModel};

/// Residual bound for a state to be accepted as a discontinuity point.
pub const ZPOINT_ACCEPT_TOL: f64 = 1e-6;
/// Relative tolerance of the finite-difference cross-check of the test matrix.
pub const CROSS_CHECK_TOL: f64 = 1e-5;
const CROSS_CHECK_STEP: f64 = 1e-5;
/// Strict-negativity margin on `β_f·v`.
pub const C2_MARGIN: f64 = 1e-9;
/// Slack on `∇h·v ≥ 0`.
pub const C1_SLACK: f64 = 1e-12;
/// Certificates must satisfy `‖β_Gᵀ v‖` below this.
pub const KERNEL_RESIDUAL_TOL: f64 = 1e-9;
/// `‖∇h·G‖` at or below this leaves the controller formula undefined on a ray.
pub const RAY_LGH_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestMatrix {
    pub x_bar: Vec<f64>,
    /// `∇h(x̄)`
    pub row_h: Vec<f64>,
    /// `β_f(x̄)`
    pub row_bf: Vec<f64>,
    /// `β_gᵢ(x̄)ᵀ`, one row per input column.
    pub rows_bg: Vec<Vec<f64>>,
    pub alpha_prime0: f64,
}

impl TestMatrix {
    /// The `(m + 2) × n` matrix `A`, row-major.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![self.row_h.clone(), self.row_bf.clone()];
        rows.extend(self.rows_bg.iter().cloned());
        rows
    }

    pub fn n(&self) -> usize {
        self.row_h.len()
    }
}

/// Adding `+0.0` turns `-0.0` into `0.0`, which keeps reports tidy.
fn clean(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x + 0.0).collect()
}

fn central_gradient<F>(x: &[f64], f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += CROSS_CHECK_STEP;
            m[i] -= CROSS_CHECK_STEP;
            Ok((f(&p)? - f(&m)?) / (2.0 * CROSS_CHECK_STEP))
        })
        .collect()
}

fn cross_check(row: String, symbolic: &[f64], numeric: Vec<f64>) -> Result<()> {
    let diff: Vec<f64> = symbolic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    if norm(&diff) <= CROSS_CHECK_TOL * norm(symbolic).max(1.0) {
        Ok(())
    } else {
        Err(CbfError::CrossCheckFailure {
            row,
            symbolic: symbolic.to_vec(),
            numeric,
        })
    }
}

/// Assemble the test matrix at `x̄` from the Hessian of `h` and the Jacobians
/// of `f` and `gᵢ`, and cross-check `β_f` and each `β_gᵢ` against central
/// differences of `N = ∇h·f + α(h)` and of `∇h·gᵢ`.
pub fn assemble_test_matrix(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x_bar: &[f64],
) -> Result<TestMatrix> {
    let data = point_data(model, barrier, x_bar)?;
    let residuals = [data.h, data.lf, data.lgh_norm()];
    if residuals.iter().any(|r| r.abs() > ZPOINT_ACCEPT_TOL) {
        return Err(CbfError::NotAZPoint {
            x: x_bar.to_vec(),
            residuals,
        });
    }
    let err = |e| CbfError::eval(x_bar, e);
    let hess = eval_matrix(barrier.hessian(), x_bar).map_err(err)?;
    let jf = eval_matrix(model.drift_jacobian(), x_bar).map_err(err)?;
    let alpha_prime0 = barrier.alpha().slope_at_zero();
    let grad = &data.grad_h;

    let h_f = mat_vec(&hess, &data.drift);
    let jft_grad = mat_t_vec(&jf, grad);
    let row_bf: Vec<f64> = (0..grad.len())
        .map(|i| h_f[i] + jft_grad[i] + alpha_prime0 * grad[i])
        .collect();

    let mut rows_bg = Vec::with_capacity(model.m());
    for (i, g) in data.inputs.iter().enumerate() {
        let jg = eval_matrix(model.input_jacobian(i), x_bar).map_err(err)?;
        let h_g = mat_vec(&hess, g);
        let jgt_grad = mat_t_vec(&jg, grad);
        rows_bg.push(h_g.iter().zip(&jgt_grad).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }

    let fd_n = central_gradient(x_bar, |x| Ok(point_data(model, barrier, x)?.n_value))?;
    cross_check("beta_f".into(), &row_bf, fd_n)?;
    for (i, row) in rows_bg.iter().enumerate() {
        let fd = central_gradient(x_bar, |x| Ok(point_data(model, barrier, x)?.lg[i]))?;
        cross_check(format!("beta_g{}", i + 1), row, fd)?;
    }

    Ok(TestMatrix {
        x_bar: x_bar.to_vec(),
        row_h: clean(grad.clone()),
        row_bf: clean(row_bf),
        rows_bg: rows_bg.into_iter().map(clean).collect(),
        alpha_prime0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VerdictKind {
    Unbounded,
    Bounded,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `∇h` in kernel coordinates.
    pub a: Vec<f64>,
    /// `β_f` in kernel coordinates.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundednessVerdict {
    pub kind: VerdictKind,
    /// Unit direction along which `u*` blows up (`Unbounded` only).
    pub certificate: Option<Vec<f64>>,
    pub kernel_dim: usize,
    pub diagnostics: Diagnostics,
}

/// Orthonormal basis of `ker β_Gᵀ`, in a canonical form: the standard basis
/// when the kernel is everything, and a sign convention (largest entry
/// positive) for each vector otherwise.
pub fn kernel_basis(t: &TestMatrix) -> Vec<Vec<f64>> {
    let n = t.n();
    let mut basis = null_space(&t.rows_bg, n);
    if basis.len() == n {
        return (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    for v in &mut basis {
        let lead = v.iter().cloned().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    basis
}

fn combine(basis: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let n = basis.first().map_or(0, Vec::len);
    (0..n).map(|j| basis.iter().zip(w).map(|(k, wi)| k[j] * wi).sum()).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let s = norm(&v);
    v.into_iter().map(|x| x / s + 0.0).collect()
}

/// Whether `v` is an unboundedness certificate for `t`, checked directly
/// against the rows of the test matrix.
pub fn is_valid_certificate(t: &TestMatrix, v: &[f64]) -> bool {
    let v = unit(v.to_vec());
    norm(&mat_vec(&t.rows_bg, &v)) < KERNEL_RESIDUAL_TOL
        && dot(&t.row_h, &v) >= -C1_SLACK
        && dot(&t.row_bf, &v) < -C2_MARGIN
}

/// Decide the cone-feasibility conditions on the kernel of `β_Gᵀ`.
pub fn decide_boundedness(t: &TestMatrix) -> BoundednessVerdict {
    let basis = kernel_basis(t);
    let k = basis.len();
    let a = clean(basis.iter().map(|kv| dot(kv, &t.row_h)).collect());
    let b = clean(basis.iter().map(|kv| dot(kv, &t.row_bf)).collect());
    let verdict = |kind, certificate| BoundednessVerdict {
        kind,
        certificate,
        kernel_dim: k,
        diagnostics: Diagnostics {
            a: a.clone(),
            b: b.clone(),
        },
    };

    match k {
        0 => verdict(VerdictKind::Bounded, None),
        1 => {
            let (a1, b1) = (a[0], b[0]);
            for w in [1.0, -1.0] {
                if a1 * w >= -C1_SLACK && b1 * w < -C2_MARGIN {
                    let v = unit(basis[0].iter().map(|x| x * w).collect());
                    if is_valid_certificate(t, &v) {
                        return verdict(VerdictKind::Unbounded, Some(v));
                    }
                }
            }
            let excluded = |w: f64| a1 * w < -C1_SLACK || b1 * w > C2_MARGIN;
            if excluded(1.0) && excluded(-1.0) {
                verdict(VerdictKind::Bounded, None)
            } else {
                verdict(VerdictKind::Indeterminate, None)
            }
        }
        _ => {
            // Unit w maximizing -b·w over the half-space a·w ≥ 0: project -b onto it.
            let a2 = dot(&a, &a);
            let shift = if a2 > 0.0 { (dot(&a, &b) / a2).max(0.0) } else { 0.0 };
            let w: Vec<f64> = b.iter().zip(&a).map(|(bi, ai)| -bi + shift * ai).collect();
            if norm(&w) > 0.0 {
                let v = unit(combine(&basis, &w));
                if is_valid_certificate(t, &v) {
                    return verdict(VerdictKind::Unbounded, Some(v));
                }
            }
            verdict(VerdictKind::Indeterminate, None)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Inevitability {
    InevitablyUnbounded,
    NotDetermined,
}

/// Unbounded is unavoidable when `∇h` and `β_f` restricted to `ker β_Gᵀ` are
/// linearly independent: any sign pattern of `(c₁, c₂)` is then reachable.
pub fn inevitability_check(t: &TestMatrix) -> Inevitability {
    let basis = kernel_basis(t);
    if basis.len() < 2 {
        return Inevitability::NotDetermined;
    }
    let a: Vec<f64> = basis.iter().map(|kv| dot(kv, &t.row_h)).collect();
    let b: Vec<f64> = basis.iter().map(|kv| dot(kv, &t.row_bf)).collect();
    if rank(&[a, b], basis.len()) == 2 {
        Inevitability::InevitablyUnbounded
    } else {
        Inevitability::NotDetermined
    }
}

/// Attached to every verdict: the test only covers straight-line approaches.
pub const VERDICT_CAVEAT: &str = "straight-line directions only";

/// Serialized verdict at one discontinuity point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictReport {
    pub x_bar: Vec<f64>,
    #[serde(rename = "A")]
    pub a_matrix: Vec<Vec<f64>>,
    pub alpha_prime0: f64,
    pub kind: VerdictKind,
    pub certificate_v: Option<Vec<f64>>,
    pub kernel_dim: usize,
    pub diagnostics: Diagnostics,
    pub inevitability: Inevitability,
    pub caveat: &'static str,
}

impl VerdictReport {
    pub fn new(t: &TestMatrix) -> Self {
        let verdict = decide_boundedness(t);
        VerdictReport {
            x_bar: t.x_bar.clone(),
            a_matrix: t.matrix(),
            alpha_prime0: t.alpha_prime0,
            kind: verdict.kind,
            certificate_v: verdict.certificate,
            kernel_dim: verdict.kernel_dim,
            diagnostics: verdict.diagnostics,
            inevitability: inevitability_check(t),
            caveat: VERDICT_CAVEAT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RayRegion {
    /// `N ≥ 0`, zero input.
    DPlus,
    /// `N < 0` with a nonvanishing input direction.
    DMinus,
    /// `N < 0` and `‖∇h·G‖ ≤ RAY_LGH_TOL`.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayProbeReport {
    pub x_bar: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(rename = "t")]
    pub t_samples: Vec<f64>,
    /// NaN where the formula is undefined.
    #[serde(rename = "u_norm")]
    pub u_norms: Vec<f64>,
    #[serde(rename = "region")]
    pub region_labels: Vec<RayRegion>,
    /// `h` along the ray; tangential rays leave the safe set at second order.
    pub h: Vec<f64>,
    /// Slope of `log‖u*‖` against `log t` over `DMinus` samples; `None`
    /// with fewer than [`MIN_FIT_SAMPLES`] of them.
    #[serde(rename = "exponent")]
    pub fitted_exponent: Option<f64>,
    pub limsup_estimate: f64,
}

impl RayProbeReport {
    /// The last `count` finite samples of `‖u*‖`, in probe order.
    pub fn tail(&self, count: usize) -> Vec<f64> {
        let finite: Vec<f64> = self.u_norms.iter().cloned().filter(|u| u.is_finite()).collect();
        finite[finite.len().saturating_sub(count)..].to_vec()
    }
}

pub const MIN_FIT_SAMPLES: usize = 5;
pub const DEFAULT_RAY_RATIO: f64 = 0.5;

/// Sample `‖u*(x̄ + vt)‖` on `t = t_max·0.5^k`, `k = 0..samples`.
pub fn ray_probe(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x_bar: &[f64],
    v: &[f64],
    t_max: f64,
    samples: usize,
) -> Result<RayProbeReport> {
    ray_probe_with_ratio(model, barrier, x_bar, v, t_max, samples, DEFAULT_RAY_RATIO)
}

pub fn ray_probe_with_ratio(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x_bar: &[f64],
    v: &[f64],
    t_max: f64,
    samples: usize,
    ratio: f64,
) -> Result<RayProbeReport> {
    check_dims(model, barrier, x_bar)?;
    check_dims(model, barrier, v)?;
    if (norm(v) - 1.0).abs() > 1e-9 {
        return Err(CbfError::InvalidArgument(format!("direction must be a unit vector, |v| = {}", norm(v))));
    }
    if samples < 8 {
        return Err(CbfError::InvalidArgument("a ray probe needs at least 8 samples".into()));
    }
    if !(t_max > 0.0 && t_max.is_finite()) || !(ratio > 0.0 && ratio < 1.0) {
        return Err(CbfError::InvalidArgument("need t_max > 0 and 0 < ratio < 1".into()));
    }

    let mut t_samples = Vec::with_capacity(samples);
    let mut u_norms = Vec::with_capacity(samples);
    let mut region_labels = Vec::with_capacity(samples);
    let mut hs = Vec::with_capacity(samples);
    let mut t = t_max;
    for _ in 0..samples {
        let x: Vec<f64> = x_bar.iter().zip(v).map(|(a, d)| a + d * t).collect();
        let d = point_data(model, barrier, &x)?;
        let lgh_norm = d.lgh_norm();
        let (region, u) = if d.n_value >= 0.0 {
            (RayRegion::DPlus, 0.0)
        } else if lgh_norm > RAY_LGH_TOL {
            (RayRegion::DMinus, -d.n_value / lgh_norm)
        } else {
            (RayRegion::Undefined, f64::NAN)
        };
        t_samples.push(t);
        u_norms.push(u);
        region_labels.push(region);
        hs.push(d.h);
        t *= ratio;
    }
    if region_labels.iter().all(|r| *r == RayRegion::Undefined) {
        return Err(CbfError::AllUndefined);
    }

    let fit: Vec<(f64, f64)> = t_samples
        .iter()
        .zip(&u_norms)
        .zip(&region_labels)
        .filter(|((_, u), r)| **r == RayRegion::DMinus && **u > 0.0)
        .map(|((t, u), _)| (t.ln(), u.ln()))
        .collect();
    let fitted_exponent = (fit.len() >= MIN_FIT_SAMPLES).then(|| least_squares_slope(&fit));
    let limsup_estimate = u_norms
        .iter()
        .cloned()
        .filter(|u| u.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(RayProbeReport {
        x_bar: x_bar.to_vec(),
        v: v.to_vec(),
        t_samples,
        u_norms,
        region_labels,
        h: hs,
        fitted_exponent,
        limsup_estimate,
    })
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `count` unit directions in the plane spanned by the inward normal
/// `∇h/‖∇h‖` and a tangent, spaced evenly over the closed half-circle
/// `∇h·v ≥ 0` (both tangents included).
pub fn admissible_directions(t: &TestMatrix, tangent_hint: Option<&[f64]>, count: usize) -> Vec<Vec<f64>> {
    let (normal, tangent) = normal_and_tangent(t, tangent_hint);
    (0..count)
        .map(|i| {
            let theta = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * i as f64 / (count.max(2) - 1) as f64;
            unit(plane_direction(&normal, &tangent, theta))
        })
        .collect()
}

/// Eight directions at 45° spacing in the normal/tangent plane, starting
/// with the inward normal.
pub fn reference_directions(t: &TestMatrix, tangent_hint: Option<&[f64]>) -> Vec<Vec<f64>> {
    let (normal, tangent) = normal_and_tangent(t, tangent_hint);
    (0..8)
        .map(|i| unit(plane_direction(&normal, &tangent, std::f64::consts::FRAC_PI_4 * i as f64)))
        .collect()
}

fn plane_direction(normal: &[f64], tangent: &[f64], theta: f64) -> Vec<f64> {
    normal
        .iter()
        .zip(tangent)
        .map(|(nv, tv)| theta.cos() * nv + theta.sin() * tv)
        .collect()
}

fn normal_and_tangent(t: &TestMatrix, hint: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let n = t.n();
    let normal = unit(t.row_h.clone());
    let candidates = hint
        .map(|h| h.to_vec())
        .into_iter()
        .chain((0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()));
    for c in candidates {
        let along = dot(&c, &normal);
        let tangent: Vec<f64> = c.iter().zip(&normal).map(|(ci, ni)| ci - along * ni).collect();
        if norm(&tangent) > 1e-8 {
            return (normal, unit(tangent));
        }
    }
    // n == 1: no tangent space.
    (normal, vec![0.0; n])
}

/// Evaluate the probe at an arbitrary state: `‖u*‖` per the closed-form
/// formula, `None` where it is undefined.
pub fn formula_norm(model: &SystemModel, barrier: &BarrierSpec, x: &[f64]) -> Result<Option<f64>> {
    let d = point_data(model, barrier, x)?;
    Ok(if d.n_value >= 0.0 {
        Some(0.0)
    } else if d.lgh_norm() > RAY_LGH_TOL {
        Some(-d.n_value / d.lgh_norm())
    } else {
        None
    })
}

/// Evaluated `∇h` at `x`; convenience for callers building directions.
pub fn barrier_gradient(barrier: &BarrierSpec, x: &[f64]) -> Result<Vec<f64>> {
    eval_vector(barrier.gradient(), x).map_err(|e| CbfError::eval(x, e))
}
