//! Chain inverse kinematics and the outer-loop position PID.
//!
//! The PID acts on the Cartesian error between the operator target and the
//! observed platform position. Its output shifts the point handed to the
//! inverse kinematics, whose readings are converted to clamped actuator
//! lengths and sent to the plant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    actuator_lengths, clamp_lengths, feasible_height_range, platform_position, ModuleReading,
    ModuleSpec, RobotPose, Vec3,
};
use crate::observer::{format_command_line, parse_sensor_line, ObserverState, STALE_PERIODS};
use crate::plant::PlantLink;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("module index {index} out of range for {count} modules")]
    ModuleIndex { index: usize, count: usize },
    #[error("target {0:?} lies outside the workspace box")]
    OutsideWorkspace([f64; 3]),
    #[error("expected {expected} seed readings, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Per-axis clamp on the error integral (mm·s).
    pub i_max_mm: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.8,
            ki: 0.1,
            kd: 0.05,
            i_max_mm: 50.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.kd >= 0.0) {
            return Err(ControlError::InvalidGains("gains must be non-negative"));
        }
        if !(self.i_max_mm > 0.0) {
            return Err(ControlError::InvalidGains("integral clamp must be positive"));
        }
        Ok(())
    }
}

/// Operator request: move platform `module_index` so its top centre reaches
/// `target_mm` (robot base frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetCommand {
    pub module_index: usize,
    pub target_mm: Vec3,
}

/// Axis-aligned box bounding every point the first `count` modules can
/// reach when fully extended.
pub fn workspace_box(specs: &[ModuleSpec]) -> (Vec3, Vec3) {
    let reach: f64 = specs.iter().map(|s| s.max_len_mm + s.plate_offset_mm).sum();
    (Vec3::new(-reach, -reach, 0.0), Vec3::new(reach, reach, reach))
}

impl TargetCommand {
    pub fn validate(&self, specs: &[ModuleSpec]) -> Result<(), ControlError> {
        if self.module_index >= specs.len() {
            return Err(ControlError::ModuleIndex {
                index: self.module_index,
                count: specs.len(),
            });
        }
        let (lo, hi) = workspace_box(&specs[..=self.module_index]);
        let t = self.target_mm;
        let inside = (0..3).all(|i| t[i].is_finite() && t[i] >= lo[i] && t[i] <= hi[i]);
        if !inside {
            return Err(ControlError::OutsideWorkspace([t.x, t.y, t.z]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub damping: f64,
    pub tol_mm: f64,
    pub max_iters: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 1e-2,
            tol_mm: 0.1,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub readings: Vec<ModuleReading>,
    pub position_error_mm: f64,
    pub iterations: usize,
    pub unreachable: bool,
}

/// Pulls a reading back inside its module's tilt limit and the height band
/// that keeps every actuator within its elongation bounds.
pub fn project_reading(spec: &ModuleSpec, reading: &ModuleReading) -> ModuleReading {
    let lim = spec.tilt_limit_rad();
    let mut phi = reading.phi_rad.clamp(-lim, lim);
    let mut theta = reading.theta_rad.clamp(-lim, lim);
    for _ in 0..60 {
        if let Some((lo, hi)) = feasible_height_range(spec, phi, theta) {
            return ModuleReading::new(reading.h_mm.clamp(lo, hi), phi, theta);
        }
        phi *= 0.9;
        theta *= 0.9;
    }
    let mid = 0.5 * (spec.min_len_mm + spec.max_len_mm);
    ModuleReading::new(mid, 0.0, 0.0)
}

/// Box bounds on each packed variable at the current readings.
fn variable_bounds(specs: &[ModuleSpec], readings: &[ModuleReading]) -> Vec<(f64, f64)> {
    specs
        .iter()
        .zip(readings)
        .flat_map(|(s, r)| {
            let lim = s.tilt_limit_rad();
            let (lo, hi) = feasible_height_range(s, r.phi_rad, r.theta_rad).unwrap_or((r.h_mm, r.h_mm));
            [(-lim, lim), (-lim, lim), (lo, hi)]
        })
        .collect()
}

fn pack(readings: &[ModuleReading]) -> DVector<f64> {
    DVector::from_iterator(
        readings.len() * 3,
        readings.iter().flat_map(|r| [r.phi_rad, r.theta_rad, r.h_mm]),
    )
}

fn unpack(x: &DVector<f64>, into: &mut [ModuleReading]) {
    for (i, r) in into.iter_mut().enumerate() {
        *r = ModuleReading::new(x[3 * i + 2], x[3 * i], x[3 * i + 1]);
    }
}

/// Damped least-squares inverse kinematics for one platform of the chain.
///
/// Only the modules up to and including `target.module_index` move; the rest
/// keep their seed readings. Starting from the seed keeps the solution close
/// to the current pose when the chain is redundant.
pub fn inverse_kinematics(
    specs: &[ModuleSpec],
    target: &TargetCommand,
    seed: &[ModuleReading],
    opts: &IkOptions,
) -> Result<IkSolution, ControlError> {
    if seed.len() != specs.len() {
        return Err(ControlError::SeedCount {
            expected: specs.len(),
            got: seed.len(),
        });
    }
    if target.module_index >= specs.len() {
        return Err(ControlError::ModuleIndex {
            index: target.module_index,
            count: specs.len(),
        });
    }
    let outside = target.validate(specs).is_err();
    let mut best = descend(specs, target, seed, opts);
    let mut iterations = best.2;
    if best.1 >= opts.tol_mm && !outside {
        // Restart from seeds leaning towards the target's azimuth.
        let azimuth = target.target_mm.y.atan2(target.target_mm.x);
        for fraction in [1.0, 0.5, 0.25] {
            let restart: Vec<ModuleReading> = specs
                .iter()
                .zip(seed)
                .map(|(s, r)| {
                    let tilt = fraction * s.tilt_limit_rad();
                    ModuleReading::new(r.h_mm, tilt * azimuth.cos(), -tilt * azimuth.sin())
                })
                .collect();
            let attempt = descend(specs, target, &restart, opts);
            iterations += attempt.2;
            if attempt.1 < best.1 {
                best = attempt;
            }
            if best.1 < opts.tol_mm {
                break;
            }
        }
    }
    let (readings, position_error_mm, _) = best;
    Ok(IkSolution {
        readings,
        position_error_mm,
        iterations,
        unreachable: outside || position_error_mm >= opts.tol_mm,
    })
}

/// Projected damped least-squares descent from one seed. Returns the
/// readings, remaining position error and iteration count.
fn descend(
    specs: &[ModuleSpec],
    target: &TargetCommand,
    seed: &[ModuleReading],
    opts: &IkOptions,
) -> (Vec<ModuleReading>, f64, usize) {
    let active = target.module_index + 1;
    let mut readings: Vec<ModuleReading> = specs
        .iter()
        .zip(seed)
        .map(|(s, r)| project_reading(s, r))
        .collect();
    let position = |rs: &[ModuleReading]| platform_position(specs, rs, target.module_index);
    let mut error = target.target_mm - position(&readings);
    let mut iterations = 0;
    let lambda_sq = opts.damping * opts.damping;

    while error.norm() >= opts.tol_mm && iterations < opts.max_iters {
        iterations += 1;
        let x = pack(&readings[..active]);
        let mut jac = DMatrix::<f64>::zeros(3, x.len());
        let mut probe = readings.clone();
        for j in 0..x.len() {
            let step = if j % 3 == 2 { 1e-5 } else { 1e-7 };
            let mut xp = x.clone();
            xp[j] += step;
            unpack(&xp, &mut probe[..active]);
            let plus = position(&probe);
            xp[j] -= 2.0 * step;
            unpack(&xp, &mut probe[..active]);
            let minus = position(&probe);
            jac.set_column(j, &((plus - minus) / (2.0 * step)));
        }
        let e = DVector::from_column_slice(error.as_slice());
        let bounds = variable_bounds(&specs[..active], &readings[..active]);
        // Variables pinned at a bound with the step pointing outward drop out
        // of the Jacobian, so the remaining ones absorb the motion.
        let mut free = vec![true; x.len()];
        let mut delta = DVector::<f64>::zeros(x.len());
        for _ in 0..=x.len() {
            let mut jac_free = jac.clone();
            for (j, _) in free.iter().enumerate().filter(|(_, f)| !**f) {
                jac_free.column_mut(j).fill(0.0);
            }
            let jjt = &jac_free * jac_free.transpose() + DMatrix::<f64>::identity(3, 3) * lambda_sq;
            let Some(inv) = jjt.try_inverse() else { break };
            delta = jac_free.transpose() * inv * &e;
            let mut changed = false;
            for j in 0..x.len() {
                let (lo, hi) = bounds[j];
                let pinned = (x[j] <= lo + 1e-9 && delta[j] < 0.0) || (x[j] >= hi - 1e-9 && delta[j] > 0.0);
                if free[j] && pinned {
                    free[j] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        // Backtrack until the projected step reduces the error.
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let mut cand = readings.clone();
            unpack(&(&x + &delta * scale), &mut cand[..active]);
            for (s, r) in specs.iter().zip(cand.iter_mut()).take(active) {
                *r = project_reading(s, r);
            }
            let cand_error = target.target_mm - position(&cand);
            if cand_error.norm() < error.norm() {
                readings = cand;
                error = cand_error;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (readings, error.norm(), iterations)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlState {
    pub integral: Vec3,
    pub prev_error: Option<Vec3>,
    pub active: bool,
    pub tol_mm: f64,
    pub timeout_ms: u64,
}

impl Default for ControlState {
    fn default() -> Self {
        Self {
            integral: Vec3::zeros(),
            prev_error: None,
            active: false,
            tol_mm: 3.0,
            timeout_ms: 20_000,
        }
    }
}

impl ControlState {
    pub fn reset(&mut self) {
        self.integral = Vec3::zeros();
        self.prev_error = None;
    }
}

/// One PID update on a Cartesian error. Time in the integral and derivative
/// terms is measured in seconds; the first step has no derivative term.
pub fn pid_step(ctrl: &mut ControlState, gains: &PidGains, error_mm: Vec3, dt_ms: f64) -> Vec3 {
    let dt = dt_ms / 1000.0;
    ctrl.integral = (ctrl.integral + error_mm * dt).map(|v| v.clamp(-gains.i_max_mm, gains.i_max_mm));
    let derivative = match ctrl.prev_error {
        Some(prev) if dt > 0.0 => (error_mm - prev) / dt,
        _ => Vec3::zeros(),
    };
    ctrl.prev_error = Some(error_mm);
    error_mm * gains.kp + ctrl.integral * gains.ki + derivative * gains.kd
}

/// Per-module clamped actuator lengths for a set of readings, in command order.
pub fn command_lengths(specs: &[ModuleSpec], readings: &[ModuleReading]) -> Vec<f64> {
    specs
        .iter()
        .zip(readings)
        .flat_map(|(s, r)| clamp_lengths(s, &actuator_lengths(s, r)).0)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    /// Write these lengths to the plant.
    Command(Vec<f64>),
    /// Observer is stale; send nothing this period.
    Hold,
    Converged { error_mm: f64 },
    Timeout { error_mm: Option<f64> },
}

/// Periodic stepper for one move towards a target. Owns the PID state; the
/// caller supplies observer snapshots and forwards commands.
#[derive(Debug, Clone)]
pub struct MoveController {
    specs: Vec<ModuleSpec>,
    target: TargetCommand,
    gains: PidGains,
    ik: IkOptions,
    pub ctrl: ControlState,
    started_ms: Option<u64>,
    last_error: Option<f64>,
    unreachable: bool,
}

impl MoveController {
    pub fn new(specs: Vec<ModuleSpec>, target: TargetCommand, gains: PidGains, ctrl: ControlState) -> Self {
        Self {
            specs,
            target,
            gains,
            ik: IkOptions::default(),
            ctrl: ControlState { active: true, ..ctrl },
            started_ms: None,
            last_error: None,
            unreachable: false,
        }
    }

    pub fn target(&self) -> &TargetCommand {
        &self.target
    }

    pub fn unreachable(&self) -> bool {
        self.unreachable
    }

    pub fn last_error(&self) -> Option<f64> {
        self.last_error
    }

    /// `snapshot` is the current estimate and the filtered readings behind it,
    /// or `None` when the observer is stale.
    pub fn tick(
        &mut self,
        now_ms: u64,
        dt_ms: f64,
        snapshot: Option<(&RobotPose, &[ModuleReading])>,
    ) -> ControlAction {
        let started = *self.started_ms.get_or_insert(now_ms);
        if !self.ctrl.active {
            return ControlAction::Hold;
        }
        let Some((pose, readings)) = snapshot else {
            if now_ms.saturating_sub(started) >= self.ctrl.timeout_ms {
                self.ctrl.active = false;
                return ControlAction::Timeout { error_mm: self.last_error };
            }
            return ControlAction::Hold;
        };
        let Some(position) = pose.platform_center(self.target.module_index) else {
            self.ctrl.active = false;
            return ControlAction::Timeout { error_mm: None };
        };
        let error = self.target.target_mm - position;
        self.last_error = Some(error.norm());
        if error.norm() <= self.ctrl.tol_mm {
            self.ctrl.active = false;
            return ControlAction::Converged { error_mm: error.norm() };
        }
        if now_ms.saturating_sub(started) >= self.ctrl.timeout_ms {
            self.ctrl.active = false;
            return ControlAction::Timeout { error_mm: self.last_error };
        }
        let correction = pid_step(&mut self.ctrl, &self.gains, error, dt_ms);
        let aim = TargetCommand {
            module_index: self.target.module_index,
            target_mm: self.target.target_mm + correction,
        };
        match inverse_kinematics(&self.specs, &aim, readings, &self.ik) {
            Ok(sol) => {
                // The shifted aim point may legitimately overshoot the box;
                // only the operator target decides reachability.
                let direct = inverse_kinematics(&self.specs, &self.target, readings, &self.ik);
                self.unreachable = direct.map(|d| d.unreachable).unwrap_or(true);
                ControlAction::Command(command_lengths(&self.specs, &sol.readings))
            }
            Err(_) => {
                self.unreachable = true;
                ControlAction::Hold
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub t_ms: u64,
    pub estimate: Option<Vec3>,
    pub command: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub outcome: Outcome,
    pub unreachable: bool,
    pub final_error_mm: Option<f64>,
    pub elapsed_ms: u64,
    pub trace: Vec<TraceEntry>,
}

/// Drives a plant to a target at a fixed control period, reading the plant's
/// sensor lines through the observer.
pub fn run_to_target<L: PlantLink>(
    link: &mut L,
    observer: &mut ObserverState,
    target: TargetCommand,
    gains: PidGains,
    ctrl: ControlState,
    period_ms: u64,
) -> RunReport {
    let specs = observer.specs().to_vec();
    let mut mc = MoveController::new(specs, target, gains, ctrl);
    let mut t_ms = 0;
    let mut trace = Vec::new();
    let mut last_frame_at: Option<u64> = None;
    let mut line = link.advance(0);
    loop {
        if let Some(frame) = line.as_deref().and_then(|l| parse_sensor_line(l).ok()) {
            if observer.ingest(&frame).is_ok() {
                last_frame_at = Some(t_ms);
            }
        }
        let stale = last_frame_at.is_none_or(|t| t_ms - t > STALE_PERIODS * period_ms);
        let pose = if stale { None } else { observer.estimate().ok().cloned() };
        let snapshot = pose.as_ref().zip(observer.filtered_readings());
        let estimate = pose.as_ref().and_then(|p| p.platform_center(target.module_index));
        let action = mc.tick(t_ms, period_ms as f64, snapshot);
        let mut entry = TraceEntry {
            t_ms,
            estimate,
            command: None,
        };
        match action {
            ControlAction::Command(lengths) => {
                let _ = link.send_command(&format_command_line(&lengths));
                entry.command = Some(lengths);
            }
            ControlAction::Hold => {}
            ControlAction::Converged { error_mm } => {
                trace.push(entry);
                return RunReport {
                    outcome: Outcome::Converged,
                    unreachable: mc.unreachable(),
                    final_error_mm: Some(error_mm),
                    elapsed_ms: t_ms,
                    trace,
                };
            }
            ControlAction::Timeout { error_mm } => {
                trace.push(entry);
                return RunReport {
                    outcome: Outcome::Timeout,
                    unreachable: mc.unreachable(),
                    final_error_mm: error_mm,
                    elapsed_ms: t_ms,
                    trace,
                };
            }
        }
        trace.push(entry);
        line = link.advance(period_ms);
        t_ms += period_ms;
    }
}
