//! Simulated manipulator and motion-capture stand-in.
//!
//! The plant holds the true module states, relaxes them towards the state
//! implied by the last length command, and emits sensor lines with
//! configurable Gaussian noise and sporadic height spikes. Ground truth is
//! available either from the rigid-rod model the observer uses or from a
//! constant-curvature arc model.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    actuator_lengths, base_vertices, chain_local_modules, clamp_lengths, forward_chain,
    rotation_from_imu, GeometryError, LocalModule, ModuleReading, ModuleSpec, RobotPose, Vec3,
};
use crate::observer::{format_sensor_line, parse_command_line, ParseError, SensorFrame};

pub const DEFAULT_TAU_MS: f64 = 300.0;
const INVERSE_MAX_ITERS: usize = 100;
/// RMS length residual below which an inverse solve counts as exact.
pub const INVERSE_RESIDUAL_TOL_MM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("expected {expected} lengths, got {got}")]
    LengthCount { expected: usize, got: usize },
    #[error("time step must be positive")]
    NonPositiveStep,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    #[default]
    Chord,
    #[serde(alias = "cc")]
    ConstantCurvature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub gauss_sigma_h_mm: f64,
    pub gauss_sigma_angle_deg: f64,
    pub spike_prob: f64,
    pub spike_mag_mm: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    /// Calibrated defaults; see the README for how they were chosen.
    fn default() -> Self {
        Self {
            gauss_sigma_h_mm: 0.3,
            gauss_sigma_angle_deg: 3.0,
            spike_prob: 0.05,
            spike_mag_mm: 20.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn disabled() -> Self {
        Self {
            gauss_sigma_h_mm: 0.0,
            gauss_sigma_angle_deg: 0.0,
            spike_prob: 0.0,
            spike_mag_mm: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err("spike probability must lie in [0, 1]");
        }
        if !(self.gauss_sigma_h_mm >= 0.0 && self.gauss_sigma_angle_deg >= 0.0 && self.spike_mag_mm >= 0.0) {
            return Err("noise magnitudes must be non-negative");
        }
        Ok(())
    }
}

/// Best-fit module reading for a set of actuator lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSolution {
    pub reading: ModuleReading,
    pub residual_rms_mm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Recovers `(φ, θ, h)` from actuator lengths by damped Gauss–Newton with a
/// central-difference Jacobian, keeping tilts inside the module's limit.
pub fn inverse_module(spec: &ModuleSpec, lengths: &[f64]) -> Result<InverseSolution, PlantError> {
    if lengths.len() != spec.actuator_count {
        return Err(PlantError::LengthCount {
            expected: spec.actuator_count,
            got: lengths.len(),
        });
    }
    let lim = spec.tilt_limit_rad();
    let residual = |x: &Vector3<f64>| -> Vec<f64> {
        actuator_lengths(spec, &ModuleReading::new(x[2], x[0], x[1]))
            .iter()
            .zip(lengths)
            .map(|(l, t)| l - t)
            .collect()
    };
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    let mut x = Vector3::new(0.0, 0.0, mean);
    let mut r = residual(&x);
    let mut cost = rms(&r);
    let mut damping = 1e-6;
    let mut iterations = 0;

    while iterations < INVERSE_MAX_ITERS && cost > 1e-12 {
        iterations += 1;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        let mut cols = [vec![], vec![], vec![]];
        for (j, col) in cols.iter_mut().enumerate() {
            let step = if j == 2 { 1e-6 } else { 1e-7 };
            let mut hi = x;
            let mut lo = x;
            hi[j] += step;
            lo[j] -= step;
            *col = residual(&hi)
                .iter()
                .zip(residual(&lo))
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect();
        }
        for a in 0..3 {
            for b in 0..3 {
                jtj[(a, b)] = cols[a].iter().zip(&cols[b]).map(|(p, q)| p * q).sum();
            }
            jtr[a] = cols[a].iter().zip(&r).map(|(p, q)| p * q).sum();
        }

        let mut accepted = false;
        let mut stalled = false;
        for _ in 0..20 {
            let lhs = jtj + Matrix3::from_diagonal(&jtj.diagonal().map(|d| d.max(1e-12))) * damping;
            let Some(delta) = lhs.lu().solve(&(-jtr)) else {
                damping *= 10.0;
                continue;
            };
            let mut cand = x + delta;
            cand[0] = cand[0].clamp(-lim, lim);
            cand[1] = cand[1].clamp(-lim, lim);
            cand[2] = cand[2].max(1e-6);
            let cand_r = residual(&cand);
            let cand_cost = rms(&cand_r);
            if cand_cost < cost {
                let progress = cost - cand_cost;
                x = cand;
                r = cand_r;
                cost = cand_cost;
                damping = (damping * 0.3).max(1e-12);
                accepted = true;
                stalled = progress < 1e-15;
                break;
            }
            damping *= 10.0;
        }
        if !accepted || stalled {
            break;
        }
    }
    Ok(InverseSolution {
        reading: ModuleReading::new(x[2], x[0], x[1]),
        residual_rms_mm: cost,
        iterations,
        converged: cost <= INVERSE_RESIDUAL_TOL_MM,
    })
}

/// Local geometry of a module bent as a circular arc of length `h`.
///
/// The plate keeps the orientation given by the IMU tilts; its centre sits at
/// the arc tip instead of on the local Z axis.
pub fn constant_curvature_local(spec: &ModuleSpec, reading: &ModuleReading) -> LocalModule {
    let rotation = rotation_from_imu(reading.phi_rad, reading.theta_rad);
    let tip = arc_tip(reading.h_mm, &rotation.column(2).into_owned());
    let base = base_vertices(spec);
    let top = base.iter().map(|b| tip + rotation * b).collect();
    LocalModule {
        rotation,
        top_center: tip,
        base_vertices: base,
        top_vertices: top,
    }
}

/// Tip of an arc of length `s` leaving the origin along +Z and ending
/// tangent to `normal`.
pub fn arc_tip(s: f64, normal: &Vec3) -> Vec3 {
    let lateral = Vec3::new(normal.x, normal.y, 0.0);
    let lateral_norm = lateral.norm();
    let alpha = lateral_norm.atan2(normal.z);
    if alpha < 1e-6 || lateral_norm < 1e-12 {
        // Series limits of (1 − cos α)/α and sin α/α.
        let a2 = alpha * alpha;
        let dir = if lateral_norm < 1e-12 { Vec3::zeros() } else { lateral / lateral_norm };
        return dir * s * (alpha / 2.0 - alpha * a2 / 24.0) + Vec3::z() * s * (1.0 - a2 / 6.0);
    }
    let radius = s / alpha;
    lateral / lateral_norm * radius * (1.0 - alpha.cos()) + Vec3::z() * radius * alpha.sin()
}

/// Resultant tilt of a reading: angle between the plate normal and +Z.
pub fn resultant_tilt(reading: &ModuleReading) -> f64 {
    let n = rotation_from_imu(reading.phi_rad, reading.theta_rad).column(2).into_owned();
    n.x.hypot(n.y).atan2(n.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub specs: Vec<ModuleSpec>,
    pub true_readings: Vec<ModuleReading>,
    pub commanded: Vec<ModuleReading>,
    pub mode: PlantMode,
    pub time_ms: u64,
    pub tau_ms: f64,
}

impl PlantState {
    pub fn new(specs: Vec<ModuleSpec>, initial: Vec<ModuleReading>, mode: PlantMode) -> Self {
        Self {
            specs,
            commanded: initial.clone(),
            true_readings: initial,
            mode,
            time_ms: 0,
            tau_ms: DEFAULT_TAU_MS,
        }
    }

    pub fn total_actuators(&self) -> usize {
        self.specs.iter().map(|s| s.actuator_count).sum()
    }

    /// Actuator lengths implied by the true state, in command order.
    pub fn true_lengths(&self) -> Vec<f64> {
        self.specs
            .iter()
            .zip(&self.true_readings)
            .flat_map(|(s, r)| actuator_lengths(s, r))
            .collect()
    }

    /// Advances the clock by `dt_ms`, tracking the given command with a
    /// first-order lag. Each module's slice of `commanded_lengths` is
    /// clamped to its elongation bounds before inversion.
    pub fn step(&mut self, dt_ms: f64, commanded_lengths: &[f64]) -> Result<(), PlantError> {
        if !(dt_ms > 0.0) {
            return Err(PlantError::NonPositiveStep);
        }
        let total = self.total_actuators();
        if commanded_lengths.len() != total {
            return Err(PlantError::LengthCount {
                expected: total,
                got: commanded_lengths.len(),
            });
        }
        let mut offset = 0;
        for (i, spec) in self.specs.iter().enumerate() {
            let slice = &commanded_lengths[offset..offset + spec.actuator_count];
            offset += spec.actuator_count;
            let (clamped, _) = clamp_lengths(spec, slice);
            self.commanded[i] = inverse_module(spec, &clamped)?.reading;
        }
        let blend = 1.0 - (-dt_ms / self.tau_ms).exp();
        for (t, c) in self.true_readings.iter_mut().zip(&self.commanded) {
            t.h_mm += blend * (c.h_mm - t.h_mm);
            t.phi_rad += blend * (c.phi_rad - t.phi_rad);
            t.theta_rad += blend * (c.theta_rad - t.theta_rad);
        }
        self.time_ms += dt_ms.round() as u64;
        Ok(())
    }

    pub fn ground_truth(&self) -> Result<RobotPose, PlantError> {
        Ok(match self.mode {
            PlantMode::Chord => forward_chain(&self.specs, &self.true_readings)?,
            PlantMode::ConstantCurvature => {
                let locals: Vec<LocalModule> = self
                    .specs
                    .iter()
                    .zip(&self.true_readings)
                    .map(|(s, r)| constant_curvature_local(s, r))
                    .collect();
                chain_local_modules(&self.specs, &locals)?
            }
        })
    }
}

/// Seeded source of sensor noise.
#[derive(Debug, Clone)]
pub struct SensorNoise {
    model: NoiseModel,
    rng: ChaCha8Rng,
}

impl SensorNoise {
    pub fn new(model: NoiseModel) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
        }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    fn gauss(&mut self, sigma: f64) -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).map(|n| n.sample(&mut self.rng)).unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Noisy copy of a reading.
    pub fn corrupt(&mut self, r: &ModuleReading) -> ModuleReading {
        let mut h = r.h_mm + self.gauss(self.model.gauss_sigma_h_mm);
        if self.model.spike_prob > 0.0 && self.rng.random_bool(self.model.spike_prob) {
            let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
            h += sign * self.model.spike_mag_mm;
        }
        let sigma = self.model.gauss_sigma_angle_deg.to_radians();
        let max_angle = 89.9f64.to_radians();
        ModuleReading {
            h_mm: h.max(0.001),
            phi_rad: (r.phi_rad + self.gauss(sigma)).clamp(-max_angle, max_angle),
            theta_rad: (r.theta_rad + self.gauss(sigma)).clamp(-max_angle, max_angle),
        }
    }
}

/// Sensor frame for the current true state.
pub fn sample_sensors(state: &PlantState, noise: &mut SensorNoise) -> SensorFrame {
    SensorFrame {
        t_ms: state.time_ms,
        readings: state.true_readings.iter().map(|r| noise.corrupt(r)).collect(),
    }
}

/// Sensor line for the current true state.
pub fn read_sensors(state: &PlantState, noise: &mut SensorNoise) -> String {
    format_sensor_line(&sample_sensors(state, noise))
}

/// Byte-level link to a plant: command lines in, sensor lines out.
pub trait PlantLink {
    fn send_command(&mut self, line: &str) -> Result<(), PlantError>;
    /// Advances the plant clock and returns the next sensor line, if one
    /// arrived.
    fn advance(&mut self, dt_ms: u64) -> Option<String>;
}

/// In-process simulated plant speaking the line protocol.
#[derive(Debug, Clone)]
pub struct SimPlant {
    pub state: PlantState,
    noise: SensorNoise,
    command: Vec<f64>,
    /// Every length ever accepted on the command channel.
    pub command_log: Vec<Vec<f64>>,
}

impl SimPlant {
    pub fn new(state: PlantState, noise: NoiseModel) -> Self {
        let command = state.true_lengths();
        Self {
            state,
            noise: SensorNoise::new(noise),
            command,
            command_log: Vec::new(),
        }
    }

    pub fn current_command(&self) -> &[f64] {
        &self.command
    }
}

impl PlantLink for SimPlant {
    fn send_command(&mut self, line: &str) -> Result<(), PlantError> {
        let lengths = parse_command_line(line)?;
        let total = self.state.total_actuators();
        if lengths.len() != total {
            return Err(PlantError::LengthCount {
                expected: total,
                got: lengths.len(),
            });
        }
        self.command_log.push(lengths.clone());
        self.command = lengths;
        Ok(())
    }

    fn advance(&mut self, dt_ms: u64) -> Option<String> {
        if dt_ms > 0 {
            let command = self.command.clone();
            self.state.step(dt_ms as f64, &command).ok()?;
        }
        Some(read_sensors(&self.state, &mut self.noise))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reference_robot, rest_readings, REFERENCE_REST_HEIGHT_MM};
    use crate::observer::parse_sensor_line;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_lengths_invert_to_straight_module() {
        let spec = ModuleSpec::default();
        let sol = inverse_module(&spec, &[44.0; 3]).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.reading, ModuleReading::new(44.0, 0.0, 0.0));
        assert_eq!(sol.residual_rms_mm, 0.0);
    }

    #[test]
    fn inverse_recovers_tilted_reading() {
        let spec = ModuleSpec::default();
        let truth = ModuleReading::from_degrees(43.0, 6.5, -8.0);
        let sol = inverse_module(&spec, &actuator_lengths(&spec, &truth)).unwrap();
        assert!(sol.converged, "{sol:?}");
        assert_abs_diff_eq!(sol.reading.h_mm, truth.h_mm, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.reading.phi_rad, truth.phi_rad, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.reading.theta_rad, truth.theta_rad, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_lengths_are_flagged() {
        let spec = ModuleSpec::default();
        let sol = inverse_module(&spec, &[60.0, 30.0, 30.0]).unwrap();
        // The nearest tilt-limited plate cannot reproduce a 30 mm spread.
        let best = actuator_lengths(&spec, &sol.reading);
        let direct = rms(&best.iter().zip([60.0, 30.0, 30.0]).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert_abs_diff_eq!(direct, sol.residual_rms_mm, epsilon = 1e-12);
        assert!(!sol.converged);
        assert!(sol.residual_rms_mm > 1.0);
        assert_abs_diff_eq!(sol.reading.phi_rad.abs(), spec.tilt_limit_rad(), epsilon = 1e-12);
    }

    #[test]
    fn inverse_checks_length_count() {
        assert!(matches!(
            inverse_module(&ModuleSpec::default(), &[40.0; 4]),
            Err(PlantError::LengthCount { expected: 3, got: 4 })
        ));
    }

    fn rest_plant() -> PlantState {
        let specs = reference_robot();
        let rest = rest_readings(&specs, REFERENCE_REST_HEIGHT_MM);
        PlantState::new(specs, rest, PlantMode::Chord)
    }

    #[test]
    fn holding_command_only_advances_time() {
        let mut p = rest_plant();
        let before = p.true_readings.clone();
        let cmd = p.true_lengths();
        p.step(100.0, &cmd).unwrap();
        assert_eq!(p.time_ms, 100);
        for (a, b) in p.true_readings.iter().zip(&before) {
            assert_abs_diff_eq!(a.h_mm, b.h_mm, epsilon = 1e-9);
            assert_abs_diff_eq!(a.phi_rad, b.phi_rad, epsilon = 1e-9);
        }
    }

    #[test]
    fn lag_halves_gap_after_tau_ln2() {
        let mut p = rest_plant();
        let cmd = vec![50.0; 6];
        p.step(DEFAULT_TAU_MS * std::f64::consts::LN_2, &cmd).unwrap();
        let gap = 50.0 - p.true_readings[0].h_mm;
        assert_abs_diff_eq!(gap, (50.0 - REFERENCE_REST_HEIGHT_MM) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn lag_converges_after_many_tau() {
        let mut p = rest_plant();
        let cmd = vec![50.0; 6];
        for _ in 0..30 {
            p.step(100.0, &cmd).unwrap();
        }
        assert!((p.true_readings[1].h_mm - 50.0).abs() < 0.05);
    }

    #[test]
    fn step_rejects_bad_input() {
        let mut p = rest_plant();
        assert_eq!(p.step(0.0, &[40.0; 6]), Err(PlantError::NonPositiveStep));
        assert!(matches!(p.step(10.0, &[40.0; 5]), Err(PlantError::LengthCount { .. })));
    }

    #[test]
    fn noiseless_sensors_report_truth() {
        let mut p = rest_plant();
        p.true_readings[0] = ModuleReading::from_degrees(42.5, 4.0, -2.0);
        let mut noise = SensorNoise::new(NoiseModel::disabled());
        let frame = sample_sensors(&p, &mut noise);
        assert_eq!(frame.readings, p.true_readings);
        let line = read_sensors(&p, &mut noise);
        assert_eq!(line, "S,0,42.5,4.0,-2.0,41.25,0.0,0.0\n");
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let p = rest_plant();
        let model = NoiseModel::default().with_seed(7);
        let run = || {
            let mut n = SensorNoise::new(model);
            (0..50).map(|_| read_sensors(&p, &mut n)).collect::<String>()
        };
        assert_eq!(run(), run());
        let mut other = SensorNoise::new(model.with_seed(8));
        assert_ne!(run(), (0..50).map(|_| read_sensors(&p, &mut other)).collect::<String>());
    }

    #[test]
    fn spike_rate_matches_binomial() {
        let p = PlantState::new(
            vec![ModuleSpec::default()],
            vec![ModuleReading::new(40.0, 0.0, 0.0)],
            PlantMode::Chord,
        );
        let mut noise = SensorNoise::new(NoiseModel::default().with_seed(1234));
        let n = 10_000;
        let spikes = (0..n)
            .filter(|_| (sample_sensors(&p, &mut noise).readings[0].h_mm - 40.0).abs() > 10.0)
            .count() as f64;
        let mean = n as f64 * 0.05;
        let sd = (n as f64 * 0.05 * 0.95).sqrt();
        assert!((spikes - mean).abs() <= 3.0 * sd, "{spikes}");
    }

    #[test]
    fn arc_tip_fixtures() {
        assert_eq!(arc_tip(42.5, &Vec3::z()), Vec3::new(0.0, 0.0, 42.5));
        // α = 10° bending towards +X, closed-form arc.
        let a = 10f64.to_radians();
        let n = Vec3::new(a.sin(), 0.0, a.cos());
        let tip = arc_tip(42.5, &n);
        assert_abs_diff_eq!(tip, Vec3::new(3.699419443313478, 0.0, 42.28455772692519), epsilon = 1e-9);
        assert_abs_diff_eq!((tip - Vec3::new(0.0, 0.0, 42.5)).norm(), 3.705687465315099, epsilon = 1e-9);
        // Continuity across the series branch.
        let tiny: f64 = 1e-7;
        let small = arc_tip(42.5, &Vec3::new(tiny.sin(), 0.0, tiny.cos()));
        assert_abs_diff_eq!(small.x, 42.5 * tiny / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn chord_and_arc_agree_when_straight() {
        let mut p = rest_plant();
        let chord = p.ground_truth().unwrap();
        p.mode = PlantMode::ConstantCurvature;
        assert_eq!(p.ground_truth().unwrap().end_effector, chord.end_effector);
    }

    #[test]
    fn arc_divergence_grows_with_tilt() {
        let spec = ModuleSpec::default();
        let mut prev = -1.0;
        for deg in 0..=10 {
            let r = ModuleReading::from_degrees(42.5, deg as f64, 0.0);
            let chord = LocalModule::chord(&spec, &r).top_center;
            let arc = constant_curvature_local(&spec, &r).top_center;
            let gap = (chord - arc).norm();
            assert!(gap > prev || (deg == 0 && gap == 0.0));
            prev = gap;
        }
    }

    #[test]
    fn sim_plant_speaks_line_protocol() {
        let mut sim = SimPlant::new(rest_plant(), NoiseModel::disabled());
        sim.send_command("C,45.0,45.0,45.0,41.25,41.25,41.25\n").unwrap();
        assert!(sim.send_command("C,45.0\n").is_err());
        let line = sim.advance(100).unwrap();
        let frame = parse_sensor_line(&line).unwrap();
        assert_eq!(frame.t_ms, 100);
        assert!(frame.readings[0].h_mm > REFERENCE_REST_HEIGHT_MM);
        assert_eq!(sim.command_log.len(), 1);
    }
}
