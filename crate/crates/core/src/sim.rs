//! Closed-loop simulation of `ẋ = f(x) + G(x)u*(x)` with safety and
//! near-discontinuity monitoring.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::controller::{fmt_num, norm, point_data, PointData, BOUNDARY_TOL, LGH_ZERO_TOL};
use crate::error::{CbfError, Result};
use crate::model::{check_dims, AlphaSpec, BarrierSpec, SystemModel};
use crate::zset::ZPoint;

pub const DEFAULT_DT: f64 = 1e-3;
/// `NearZ` fires when `‖∇h·G‖` drops below this while `N < 0`.
pub const NEAR_Z_LGH: f64 = 1e-4;
/// `SafetyViolated` fires when `h` drops below this.
pub const SAFETY_TOL: f64 = -1e-6;
const MIN_ADAPTIVE_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    NearZ,
    ControlSaturated,
    LeftDomainBox,
    SafetyViolated,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::NearZ,
        EventKind::ControlSaturated,
        EventKind::LeftDomainBox,
        EventKind::SafetyViolated,
    ];

    pub fn bit(self) -> u8 {
        match self {
            EventKind::NearZ => 1,
            EventKind::ControlSaturated => 2,
            EventKind::LeftDomainBox => 4,
            EventKind::SafetyViolated => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventData {
    pub x: Vec<f64>,
    pub h: f64,
    #[serde(rename = "N")]
    pub n_value: f64,
    pub lgh_norm: f64,
    /// Uncapped `‖u*‖`; NaN outside the safe set where undefined.
    pub u_star_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub data: EventData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StepControl {
    /// Classical RK4 with a fixed step.
    Fixed(f64),
    /// Dormand–Prince 5(4) with mixed absolute/relative tolerance.
    Adaptive(f64),
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Fixed(DEFAULT_DT)
    }
}

impl StepControl {
    /// Fixed steps: `Δt²`, the local error bound of the closed loop at its
    /// kinks where `u*` is only Lipschitz. Adaptive: the requested tolerance.
    pub fn tolerance(self) -> f64 {
        match self {
            StepControl::Fixed(dt) => dt * dt,
            StepControl::Adaptive(tol) => tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Applied inputs, after the cap.
    pub inputs: Vec<Vec<f64>>,
    /// Uncapped `‖u*‖` at each recorded state.
    pub u_star_norms: Vec<f64>,
    pub h_values: Vec<f64>,
    #[serde(rename = "N_values")]
    pub n_values: Vec<f64>,
    pub lgh_norms: Vec<f64>,
    pub event_flags: Vec<u8>,
    pub events: Vec<SimEvent>,
    pub step_control: StepControl,
    pub u_cap: Option<f64>,
}

/// Allowed slack on the discrete barrier inequality.
pub fn discrete_tolerance(step: StepControl) -> f64 {
    10.0 * step.tolerance()
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn min_h(&self) -> f64 {
        self.h_values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Steps `k` where `h(t_{k+1}) < h(t_k) − α(h(t_k))·Δt_k − ε_int`.
    pub fn discrete_cbf_failures(&self, alpha: &AlphaSpec) -> Vec<usize> {
        let eps = discrete_tolerance(self.step_control);
        (0..self.len().saturating_sub(1))
            .filter(|&k| {
                let dt = self.times[k + 1] - self.times[k];
                let h = self.h_values[k];
                self.h_values[k + 1] < h - alpha.eval(h) * dt - eps
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        writeln!(
            out,
            "# event_flags bitmask: 1 = NearZ, 2 = ControlSaturated, 4 = LeftDomainBox, 8 = SafetyViolated"
        )?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend(["h", "N", "lgh_norm", "event_flags"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt_num(*v)));
            row.extend(self.inputs[k].iter().map(|v| fmt_num(*v)));
            row.push(fmt_num(self.h_values[k]));
            row.push(fmt_num(self.n_values[k]));
            row.push(fmt_num(self.lgh_norms[k]));
            row.push(self.event_flags[k].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn events_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.events).map_err(|e| CbfError::Schema(e.to_string()))
    }
}

struct Closed<'a> {
    model: &'a SystemModel,
    barrier: &'a BarrierSpec,
    u_cap: Option<f64>,
}

struct Sample {
    data: PointData,
    u: Vec<f64>,
    u_star_norm: f64,
    saturated: bool,
}

impl Closed<'_> {
    fn sample(&self, x: &[f64]) -> Result<Sample> {
        let data = point_data(self.model, self.barrier, x)?;
        let (u, u_star_norm) = match data.min_norm_input(LGH_ZERO_TOL) {
            Some(u) => {
                let nu = norm(&u);
                (u, nu)
            }
            None if data.h >= -BOUNDARY_TOL => {
                return Err(CbfError::CbfViolation {
                    x: x.to_vec(),
                    n_value: data.n_value,
                    lgh_norm: data.lgh_norm(),
                })
            }
            // Outside the safe set with no admissible input: coast.
            None => (vec![0.0; self.model.m()], f64::NAN),
        };
        let (u, saturated) = match self.u_cap {
            Some(cap) if u_star_norm > cap => (u.iter().map(|v| v * cap / u_star_norm).collect(), true),
            _ => (u, false),
        };
        Ok(Sample {
            data,
            u,
            u_star_norm,
            saturated,
        })
    }

    fn rhs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.sample(x)?;
        let mut dx = s.data.drift.clone();
        for (g, ui) in s.data.inputs.iter().zip(&s.u) {
            for (d, gj) in dx.iter_mut().zip(g) {
                *d += gj * ui;
            }
        }
        Ok(dx)
    }
}

fn axpy(x: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut y = x.to_vec();
    for (c, v) in terms {
        for (yi, vi) in y.iter_mut().zip(v.iter()) {
            *yi += c * vi;
        }
    }
    y
}

fn rk4_step(sys: &Closed, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    let k1 = sys.rhs(x)?;
    let k2 = sys.rhs(&axpy(x, &[(dt / 2.0, &k1)]))?;
    let k3 = sys.rhs(&axpy(x, &[(dt / 2.0, &k2)]))?;
    let k4 = sys.rhs(&axpy(x, &[(dt, &k3)]))?;
    Ok(axpy(
        x,
        &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)],
    ))
}

// Dormand–Prince 5(4) tableau; the system is autonomous so the nodes are unused.
const DP_A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince attempt: the 5th-order state and the scaled error norm.
fn dopri_step(sys: &Closed, x: &[f64], dt: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for a in DP_A {
        let terms: Vec<(f64, &[f64])> = a.iter().zip(&k).map(|(ai, ki)| (dt * ai, ki.as_slice())).collect();
        k.push(sys.rhs(&axpy(x, &terms))?);
    }
    let terms5: Vec<(f64, &[f64])> = DP_B5.iter().zip(&k).map(|(b, ki)| (dt * b, ki.as_slice())).collect();
    let x5 = axpy(x, &terms5);
    let err = (0..x.len())
        .map(|j| {
            let e: f64 = (0..7).map(|i| dt * (DP_B5[i] - DP_B4[i]) * k[i][j]).sum();
            let scale = tol * (1.0 + x[j].abs().max(x5[j].abs()));
            (e / scale).powi(2)
        })
        .sum::<f64>();
    Ok((x5, (err / x.len().max(1) as f64).sqrt()))
}

struct Recorder<'a> {
    traj: Trajectory,
    domain_box: &'a [[f64; 2]],
}

impl Recorder<'_> {
    fn record(&mut self, sys: &Closed, t: f64, x: Vec<f64>) -> Result<()> {
        let s = sys.sample(&x)?;
        let lgh_norm = s.data.lgh_norm();
        let outside_box = x
            .iter()
            .zip(self.domain_box)
            .any(|(xi, [lo, hi])| xi < lo || xi > hi);
        let active = [
            lgh_norm < NEAR_Z_LGH && s.data.n_value < 0.0,
            s.saturated,
            outside_box,
            s.data.h < SAFETY_TOL,
        ];
        let mut flags = 0u8;
        for (kind, on) in EventKind::ALL.into_iter().zip(active) {
            if on {
                flags |= kind.bit();
                self.traj.events.push(SimEvent {
                    time: t,
                    kind,
                    data: EventData {
                        x: x.clone(),
                        h: s.data.h,
                        n_value: s.data.n_value,
                        lgh_norm,
                        u_star_norm: s.u_star_norm,
                    },
                });
            }
        }
        let tr = &mut self.traj;
        tr.times.push(t);
        tr.states.push(x);
        tr.inputs.push(s.u);
        tr.u_star_norms.push(s.u_star_norm);
        tr.h_values.push(s.data.h);
        tr.n_values.push(s.data.n_value);
        tr.lgh_norms.push(lgh_norm);
        tr.event_flags.push(flags);
        Ok(())
    }
}

/// Integrate the closed loop from `x0` over `[0, t_final]`. Events are
/// evaluated at accepted steps only.
pub fn simulate(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x0: &[f64],
    t_final: f64,
    step_control: StepControl,
    u_cap: Option<f64>,
) -> Result<Trajectory> {
    check_dims(model, barrier, x0)?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(CbfError::InvalidArgument("t_final must be positive".into()));
    }
    match step_control {
        StepControl::Fixed(dt) if !(dt > 0.0 && dt.is_finite()) => {
            return Err(CbfError::InvalidArgument("step must be positive".into()))
        }
        StepControl::Adaptive(tol) if !(tol > 0.0 && tol.is_finite()) => {
            return Err(CbfError::InvalidArgument("tolerance must be positive".into()))
        }
        _ => {}
    }
    if let Some(cap) = u_cap {
        if !(cap > 0.0) {
            return Err(CbfError::InvalidArgument("u_cap must be positive".into()));
        }
    }
    let h0 = barrier.h().eval(x0).map_err(|e| CbfError::eval(x0, e))?;
    if h0 < 0.0 {
        return Err(CbfError::InitialStateUnsafe { h: h0 });
    }

    let sys = Closed { model, barrier, u_cap };
    let mut rec = Recorder {
        traj: Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            u_star_norms: Vec::new(),
            h_values: Vec::new(),
            n_values: Vec::new(),
            lgh_norms: Vec::new(),
            event_flags: Vec::new(),
            events: Vec::new(),
            step_control,
            u_cap,
        },
        domain_box: barrier.domain_box(),
    };
    rec.record(&sys, 0.0, x0.to_vec())?;
    let mut x = x0.to_vec();

    match step_control {
        StepControl::Fixed(dt) => {
            let steps = (t_final / dt - 1e-9).ceil().max(1.0) as usize;
            let mut t = 0.0;
            for k in 1..=steps {
                let t_next = if k == steps { t_final } else { k as f64 * dt };
                x = rk4_step(&sys, &x, t_next - t)?;
                t = t_next;
                rec.record(&sys, t, x.clone())?;
            }
        }
        StepControl::Adaptive(tol) => {
            let mut t = 0.0;
            let mut dt = DEFAULT_DT.min(t_final);
            while t < t_final {
                dt = dt.min(t_final - t);
                let (x_new, err) = dopri_step(&sys, &x, dt, tol)?;
                if err <= 1.0 {
                    t = if t_final - t - dt <= 1e-15 * t_final { t_final } else { t + dt };
                    x = x_new;
                    rec.record(&sys, t, x.clone())?;
                }
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                dt *= factor;
                if dt < MIN_ADAPTIVE_STEP && t < t_final {
                    return Err(CbfError::StepSizeUnderflow { t });
                }
            }
        }
    }
    Ok(rec.traj)
}

/// Independent trajectories from several initial states, run concurrently.
pub fn simulate_batch(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x0s: &[Vec<f64>],
    t_final: f64,
    step_control: StepControl,
    u_cap: Option<f64>,
) -> Vec<Result<Trajectory>> {
    x0s.par_iter()
        .map(|x0| simulate(model, barrier, x0, t_final, step_control, u_cap))
        .collect()
}

/// A maximal run of consecutive samples within `radius` of one Z point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardWindow {
    pub z: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub min_distance: f64,
    /// Largest uncapped `‖u*‖` inside the window (NaN samples skipped).
    pub max_u_star_norm: f64,
    pub saturated_events: usize,
    pub near_z_events: usize,
}

pub fn hazard_scan(trajectory: &Trajectory, zpoints: &[ZPoint], radius: f64) -> Vec<HazardWindow> {
    if !(radius > 0.0) {
        return Vec::new();
    }
    let mut windows = Vec::new();
    for z in zpoints {
        let mut open: Option<HazardWindow> = None;
        for k in 0..trajectory.len() {
            let d = norm(
                &trajectory.states[k]
                    .iter()
                    .zip(&z.x)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            if d < radius {
                let w = open.get_or_insert_with(|| HazardWindow {
                    z: z.x.clone(),
                    t_start: trajectory.times[k],
                    t_end: trajectory.times[k],
                    min_distance: d,
                    max_u_star_norm: 0.0,
                    saturated_events: 0,
                    near_z_events: 0,
                });
                w.t_end = trajectory.times[k];
                w.min_distance = w.min_distance.min(d);
                let u = trajectory.u_star_norms[k];
                if u.is_finite() {
                    w.max_u_star_norm = w.max_u_star_norm.max(u);
                }
                let flags = trajectory.event_flags[k];
                w.saturated_events += usize::from(flags & EventKind::ControlSaturated.bit() != 0);
                w.near_z_events += usize::from(flags & EventKind::NearZ.bit() != 0);
            } else if let Some(w) = open.take() {
                windows.push(w);
            }
        }
        windows.extend(open);
    }
    windows.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    windows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::evaluate_controller;
    use crate::model::load_model_str;

    fn example(i: usize) -> (SystemModel, BarrierSpec) {
        let text = match i {
            1 => include_str!("../specs/example1.json"),
            _ => include_str!("../specs/example2.json"),
        };
        load_model_str(text).unwrap()
    }

    fn z(x: [f64; 2]) -> ZPoint {
        ZPoint {
            x: x.to_vec(),
            residuals: [0.0; 3],
            basin_count: 1,
        }
    }

    #[test]
    fn example1_stays_safe_and_agrees_with_finer_step() {
        let (m, b) = example(1);
        let coarse = simulate(&m, &b, &[0.5, 0.5], 10.0, StepControl::Fixed(1e-3), None).unwrap();
        let fine = simulate(&m, &b, &[0.5, 0.5], 10.0, StepControl::Fixed(1e-4), None).unwrap();
        assert!(coarse.min_h() >= -1e-6);
        assert_eq!(coarse.events_of(EventKind::SafetyViolated).count(), 0);
        assert!((coarse.min_h() - fine.min_h()).abs() < 1e-5);
        assert!(coarse.discrete_cbf_failures(b.alpha()).is_empty());
        assert_eq!(coarse.len(), 10_001);
        assert_eq!(*coarse.times.last().unwrap(), 10.0);
    }

    #[test]
    fn controller_activates_before_the_boundary() {
        let (m, b) = example(1);
        let tr = simulate(&m, &b, &[0.0, 0.5], 3.0, StepControl::default(), None).unwrap();
        let first_active = tr.inputs.iter().position(|u| u[0] != 0.0).expect("u* activates");
        assert!(tr.h_values[first_active] > 0.0);
        let eval = evaluate_controller(&m, &b, &tr.states[first_active]).unwrap();
        assert_eq!(eval.region, crate::controller::Region::DMinus);
        assert!((eval.u_star[0] - tr.inputs[first_active][0]).abs() < 1e-15);
    }

    #[test]
    fn unsafe_start_is_rejected() {
        let (m, b) = example(1);
        let err = simulate(&m, &b, &[1.0, 1.0], 1.0, StepControl::default(), None).unwrap_err();
        assert!(matches!(err, CbfError::InitialStateUnsafe { .. }));
    }

    #[test]
    fn adaptive_matches_fixed() {
        let (m, b) = example(1);
        let fixed = simulate(&m, &b, &[0.5, 0.5], 2.0, StepControl::Fixed(1e-4), None).unwrap();
        let adaptive = simulate(&m, &b, &[0.5, 0.5], 2.0, StepControl::Adaptive(1e-9), None).unwrap();
        assert_eq!(*adaptive.times.last().unwrap(), 2.0);
        let (xf, xa) = (fixed.states.last().unwrap(), adaptive.states.last().unwrap());
        assert!(norm(&[xf[0] - xa[0], xf[1] - xa[1]]) < 1e-6);
        assert!(adaptive.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn saturation_near_z_is_flagged_and_scanned() {
        let (m, b) = example(2);
        let tr = simulate(&m, &b, &[0.9, 0.05], 4.0, StepControl::default(), Some(100.0)).unwrap();
        let windows = hazard_scan(&tr, &[z([1.0, 0.0]), z([-1.0, 0.0])], 0.1);
        assert!(!windows.is_empty());
        let w = &windows[0];
        assert!(w.saturated_events > 0);
        // Oracle: |u2*| = |N|/(2 x2³) with N = -2 x1 x2 + h on the recorded states.
        let oracle = tr
            .states
            .iter()
            .zip(&tr.times)
            .filter(|(x, t)| **t >= w.t_start && **t <= w.t_end && norm(&[x[0] - 1.0, x[1]]) < 0.1)
            .map(|(x, _)| {
                let n = -2.0 * x[0] * x[1] + 1.0 - x[0] * x[0] - x[1] * x[1];
                if n < 0.0 { -n / (2.0 * x[1].abs().powi(3)) } else { 0.0 }
            })
            .fold(0.0, f64::max);
        assert!((w.max_u_star_norm - oracle).abs() <= 1e-9 * oracle.max(1.0));
        for u in &tr.inputs {
            assert!(norm(u) <= 100.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn hazard_scan_trivial_cases() {
        let (m, b) = example(1);
        let tr = simulate(&m, &b, &[-0.2, 0.1], 1.0, StepControl::default(), None).unwrap();
        assert!(tr.states.iter().all(|x| x[0] < 0.5));
        let zs = [z([1.0, 0.0]), z([-1.0, 0.0])];
        assert!(hazard_scan(&tr, &zs, 0.1).is_empty());
        assert!(hazard_scan(&tr, &zs, 0.0).is_empty());
    }

    #[test]
    fn csv_has_bitmask_header() {
        let (m, b) = example(1);
        let tr = simulate(&m, &b, &[0.5, 0.5], 0.01, StepControl::default(), None).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# event_flags bitmask"));
        assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,h,N,lgh_norm,event_flags");
        assert_eq!(lines.count(), 11);
    }
}
