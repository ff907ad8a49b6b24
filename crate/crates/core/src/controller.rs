//! Closed-form minimum-norm safe controller, the CBF condition, and grid
//! sweeps of the controller magnitude.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CbfError, Result};
use crate::expr::eval_vector;
use crate::model::{check_dims, BarrierSpec, SystemModel};

/// `|h| ≤ BOUNDARY_TOL` counts as the boundary of the safe set.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// `‖∇h·G‖ ≤ LGH_ZERO_TOL` counts as a vanishing input direction.
pub const LGH_ZERO_TOL: f64 = 1e-12;
/// Slack allowed on the CBF inequality by [`feasible_set_check`].
pub const FEASIBILITY_SLACK: f64 = 1e-12;

/// Barrier data evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PointData {
    pub h: f64,
    pub grad_h: Vec<f64>,
    pub drift: Vec<f64>,
    /// Input columns `gᵢ(x)`.
    pub inputs: Vec<Vec<f64>>,
    /// `∇h·f`
    pub lf: f64,
    /// `(∇h·G)ᵀ`
    pub lg: Vec<f64>,
    /// `N = ∇h·f + α(h)`
    pub n_value: f64,
}

impl PointData {
    pub fn lgh_norm(&self) -> f64 {
        norm(&self.lg)
    }

    /// `-(N/‖∇h·G‖²)(∇h·G)ᵀ` when `N < 0`, zero when `N ≥ 0`, and `None`
    /// when `N < 0` but `‖∇h·G‖ ≤ zero_tol`.
    pub fn min_norm_input(&self, zero_tol: f64) -> Option<Vec<f64>> {
        if self.n_value >= 0.0 {
            return Some(vec![0.0; self.lg.len()]);
        }
        let norm2: f64 = self.lg.iter().map(|v| v * v).sum();
        if norm2.sqrt() <= zero_tol {
            return None;
        }
        let scale = -self.n_value / norm2;
        Some(self.lg.iter().map(|v| scale * v).collect())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn point_data(model: &SystemModel, barrier: &BarrierSpec, x: &[f64]) -> Result<PointData> {
    check_dims(model, barrier, x)?;
    let err = |e| CbfError::eval(x, e);
    let h = barrier.h().eval(x).map_err(err)?;
    let grad_h = eval_vector(barrier.gradient(), x).map_err(err)?;
    let drift = model.drift().eval(x).map_err(err)?;
    let inputs = model
        .inputs()
        .iter()
        .map(|g| g.eval(x))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(err)?;
    let lf = dot(&grad_h, &drift);
    let lg = inputs.iter().map(|g| dot(&grad_h, g)).collect();
    let n_value = lf + barrier.alpha().eval(h);
    Ok(PointData {
        h,
        grad_h,
        drift,
        inputs,
        lf,
        lg,
        n_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    DPlus,
    DMinus,
    Exterior,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::DPlus => "DPlus",
            Region::DMinus => "DMinus",
            Region::Exterior => "Exterior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlEvaluation {
    pub x: Vec<f64>,
    pub h_val: f64,
    #[serde(rename = "N")]
    pub n_value: f64,
    pub lgh: Vec<f64>,
    pub lgh_norm: f64,
    pub region: Region,
    /// NaN entries outside the safe set where no input satisfies the condition.
    pub u_star: Vec<f64>,
}

impl ControlEvaluation {
    pub fn u_norm(&self) -> f64 {
        norm(&self.u_star)
    }
}

/// Evaluate `u*(x)` and its region label.
///
/// Inside the safe set a state with `N < 0` and `‖∇h·G‖ ≤ LGH_ZERO_TOL` is a
/// [`CbfError::CbfViolation`]. Outside it, the formula is still evaluated where
/// defined and `u*` is NaN elsewhere.
pub fn evaluate_controller(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x: &[f64],
) -> Result<ControlEvaluation> {
    let data = point_data(model, barrier, x)?;
    let lgh_norm = data.lgh_norm();
    let inside = data.h >= -BOUNDARY_TOL;
    let u = data.min_norm_input(LGH_ZERO_TOL);
    let region = match (inside, data.n_value >= 0.0) {
        (false, _) => Region::Exterior,
        (true, true) => Region::DPlus,
        (true, false) => Region::DMinus,
    };
    let u_star = match u {
        Some(u) => u,
        None if inside => {
            return Err(CbfError::CbfViolation {
                x: x.to_vec(),
                n_value: data.n_value,
                lgh_norm,
            })
        }
        None => vec![f64::NAN; model.m()],
    };
    Ok(ControlEvaluation {
        x: x.to_vec(),
        h_val: data.h,
        n_value: data.n_value,
        lgh: data.lg,
        lgh_norm,
        region,
        u_star,
    })
}

/// Whether `u` lies in the CBF-admissible input set at `x`.
pub fn feasible_set_check(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x: &[f64],
    u: &[f64],
) -> Result<bool> {
    let data = point_data(model, barrier, x)?;
    if u.len() != model.m() {
        return Err(CbfError::DimensionMismatch(format!(
            "input has {} entries, expected {}",
            u.len(),
            model.m()
        )));
    }
    Ok(data.n_value + dot(&data.lg, u) >= -FEASIBILITY_SLACK)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Evaluated(ControlEvaluation),
    /// CBF condition fails inside the safe set.
    Violation { h: f64, n_value: f64, lgh_norm: f64 },
    /// Some expression could not be evaluated (log of a negative, ...).
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub x: Vec<f64>,
    pub outcome: CellOutcome,
}

/// Row-major grid of controller evaluations; the first swept axis varies slowest.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub axes: Vec<usize>,
    pub resolution: usize,
    pub cells: Vec<SweepCell>,
}

impl Sweep {
    /// States inside the safe set where the CBF condition failed.
    pub fn violations(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Violation { .. }))
    }

    /// Largest finite `‖u*‖` over evaluated cells inside the safe set.
    pub fn max_u_norm_in_safe_set(&self) -> Option<(&SweepCell, f64)> {
        self.cells
            .iter()
            .filter_map(|c| match &c.outcome {
                CellOutcome::Evaluated(ev) if ev.region != Region::Exterior => {
                    let u = ev.u_norm();
                    u.is_finite().then_some((c, u))
                }
                _ => None,
            })
            .fold(None, |best: Option<(&SweepCell, f64)>, (c, u)| match best {
                Some((_, b)) if b >= u => best,
                _ => Some((c, u)),
            })
    }

    pub fn write_csv<W: Write>(&self, n: usize, m: usize, mut out: W) -> Result<()> {
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.extend(["h", "N", "lgh_norm", "region"].map(String::from));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("u_norm".into());
        writeln!(out, "{}", header.join(","))?;
        for cell in &self.cells {
            let mut row: Vec<String> = cell.x.iter().map(|v| fmt_num(*v)).collect();
            match &cell.outcome {
                CellOutcome::Evaluated(ev) => {
                    row.extend([ev.h_val, ev.n_value, ev.lgh_norm].map(fmt_num));
                    row.push(ev.region.label().into());
                    row.extend(ev.u_star.iter().map(|v| fmt_num(*v)));
                    row.push(fmt_num(ev.u_norm()));
                }
                CellOutcome::Violation {
                    h,
                    n_value,
                    lgh_norm,
                } => {
                    row.extend([*h, *n_value, *lgh_norm].map(fmt_num));
                    row.push("CBFViolation".into());
                    row.extend((0..=m).map(|_| "nan".to_string()));
                }
                CellOutcome::Failed(_) => {
                    row.extend((0..3).map(|_| "nan".to_string()));
                    row.push("EvalError".into());
                    row.extend((0..=m).map(|_| "nan".to_string()));
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

fn axis_value(lo: f64, hi: f64, k: usize, resolution: usize) -> f64 {
    if k + 1 == resolution {
        hi
    } else {
        lo + (hi - lo) * k as f64 / (resolution - 1) as f64
    }
}

/// Sweep every axis of the domain box at `resolution` points per axis.
pub fn sweep_grid(model: &SystemModel, barrier: &BarrierSpec, resolution: usize) -> Result<Sweep> {
    let axes: Vec<usize> = (0..barrier.n()).collect();
    let base: Vec<f64> = barrier.domain_box().iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect();
    sweep_slice(model, barrier, &axes, resolution, &base)
}

/// Sweep the listed axes over the domain box, holding the other coordinates at `base`.
pub fn sweep_slice(
    model: &SystemModel,
    barrier: &BarrierSpec,
    axes: &[usize],
    resolution: usize,
    base: &[f64],
) -> Result<Sweep> {
    check_dims(model, barrier, base)?;
    if resolution < 2 {
        return Err(CbfError::InvalidArgument("resolution must be at least 2".into()));
    }
    if axes.is_empty() || axes.iter().any(|&a| a >= base.len()) {
        return Err(CbfError::InvalidArgument(format!("invalid sweep axes {axes:?}")));
    }
    let total = resolution
        .checked_pow(axes.len() as u32)
        .ok_or_else(|| CbfError::InvalidArgument("sweep grid too large".into()))?;
    let bounds = barrier.domain_box();
    let cells = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut x = base.to_vec();
            let mut rest = flat;
            for &axis in axes.iter().rev() {
                let k = rest % resolution;
                rest /= resolution;
                let [lo, hi] = bounds[axis];
                x[axis] = axis_value(lo, hi, k, resolution);
            }
            let outcome = match evaluate_controller(model, barrier, &x) {
                Ok(ev) => CellOutcome::Evaluated(ev),
                Err(CbfError::CbfViolation {
                    n_value, lgh_norm, ..
                }) => CellOutcome::Violation {
                    h: barrier.h().eval(&x).unwrap_or(f64::NAN),
                    n_value,
                    lgh_norm,
                },
                Err(e) => CellOutcome::Failed(e.to_string()),
            };
            SweepCell { x, outcome }
        })
        .collect();
    Ok(Sweep {
        axes: axes.to_vec(),
        resolution,
        cells,
    })
}
