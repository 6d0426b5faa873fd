//! Observer accuracy evaluation against simulated motion capture.
//!
//! A trajectory is tracked open-loop through the inverse kinematics while the
//! observer estimate and the plant ground truth are sampled every period.
//! Per-axis and planar error statistics are then tabulated.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SystemConfig;
use crate::controller::{command_lengths, inverse_kinematics, IkOptions, TargetCommand};
use crate::geometry::{rest_readings, ModuleReading, Vec3, REFERENCE_REST_HEIGHT_MM};
use crate::observer::{fmt_decimal, ObserverError, ObserverState};
use crate::plant::{resultant_tilt, sample_sensors, PlantError, PlantState, SensorNoise};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("at least {needed} samples are required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("report has no samples")]
    EmptyReport,
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    Circle { amplitude_mm: f64, period_s: f64 },
    /// Figure-eight (Gerono) through the centre.
    Lemniscate { amplitude_mm: f64, period_s: f64 },
    /// Visited in order, each held for an equal share of the run.
    Waypoints { points_mm: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub path: PathSpec,
    /// Platform that follows the path; the last module when absent.
    pub module_index: Option<usize>,
    /// Height of planar paths.
    pub z_mm: f64,
    pub duration_s: f64,
    pub sample_period_ms: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            path: PathSpec::Circle {
                amplitude_mm: 6.0,
                period_s: 20.0,
            },
            module_index: None,
            z_mm: 85.0,
            duration_s: 60.0,
            sample_period_ms: 100,
        }
    }
}

impl TrajectorySpec {
    /// `builtin:circle` or `builtin:lemniscate`.
    pub fn builtin(name: &str) -> Option<Self> {
        let path = match name {
            "circle" => PathSpec::Circle {
                amplitude_mm: 6.0,
                period_s: 20.0,
            },
            "lemniscate" => PathSpec::Lemniscate {
                amplitude_mm: 7.0,
                period_s: 20.0,
            },
            _ => return None,
        };
        Some(Self {
            path,
            ..Self::default()
        })
    }

    pub fn sample_count(&self) -> usize {
        ((self.duration_s * 1000.0) / self.sample_period_ms as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.sample_period_ms == 0 || !(self.duration_s > 0.0) {
            return Err(EvalError::Trajectory("duration and period must be positive".into()));
        }
        if self.sample_count() < 2 {
            return Err(EvalError::Trajectory("fewer than two samples".into()));
        }
        match &self.path {
            PathSpec::Circle { period_s, .. } | PathSpec::Lemniscate { period_s, .. } if !(*period_s > 0.0) => {
                Err(EvalError::Trajectory("path period must be positive".into()))
            }
            PathSpec::Waypoints { points_mm } if points_mm.is_empty() => {
                Err(EvalError::Trajectory("no waypoints".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn point_at(&self, t_s: f64) -> Vec3 {
        match &self.path {
            PathSpec::Circle { amplitude_mm, period_s } => {
                let w = TAU * t_s / period_s;
                Vec3::new(amplitude_mm * w.cos(), amplitude_mm * w.sin(), self.z_mm)
            }
            PathSpec::Lemniscate { amplitude_mm, period_s } => {
                let w = TAU * t_s / period_s;
                Vec3::new(amplitude_mm * w.sin(), amplitude_mm * w.sin() * w.cos(), self.z_mm)
            }
            PathSpec::Waypoints { points_mm } => {
                let share = self.duration_s / points_mm.len() as f64;
                let i = ((t_s / share).floor() as usize).min(points_mm.len() - 1);
                Vec3::from(points_mm[i])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t_ms: u64,
    pub estimate: Vec3,
    pub truth: Vec3,
    /// Largest resultant tilt among the true module states.
    pub max_tilt_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub samples: Vec<Sample>,
    /// Some trajectory point could not be reached by the inverse kinematics.
    pub diverged: bool,
}

/// Runs a trajectory on the simulated plant and samples estimate vs truth.
///
/// Sensor frames travel in-process at full precision. The plant starts at
/// the first trajectory point.
pub fn run_eval(config: &SystemConfig, traj: &TrajectorySpec) -> Result<EvalRun, EvalError> {
    traj.validate()?;
    let specs = config.modules.clone();
    let index = traj.module_index.unwrap_or(specs.len() - 1);
    if index >= specs.len() {
        return Err(EvalError::Trajectory(format!("module {index} out of range")));
    }
    let ik = IkOptions::default();
    let solve = |t_s: f64, seed: &[ModuleReading]| {
        let target = TargetCommand {
            module_index: index,
            target_mm: traj.point_at(t_s),
        };
        inverse_kinematics(&specs, &target, seed, &ik).map_err(|e| EvalError::Trajectory(e.to_string()))
    };

    let rest = rest_readings(&specs, REFERENCE_REST_HEIGHT_MM);
    let start = solve(0.0, &rest)?;
    let mut diverged = start.unreachable;
    let mut plant = PlantState::new(specs.clone(), start.readings.clone(), config.plant_mode);
    let mut noise = SensorNoise::new(config.noise);
    let mut observer = ObserverState::with_filter(specs.clone(), config.filter);
    let mut seed = start.readings;

    let period = traj.sample_period_ms;
    let mut samples = Vec::with_capacity(traj.sample_count());
    for k in 0..traj.sample_count() {
        if k > 0 {
            let sol = solve(k as f64 * period as f64 / 1000.0, &seed)?;
            diverged |= sol.unreachable;
            plant.step(period as f64, &command_lengths(&specs, &sol.readings))?;
            seed = sol.readings;
        }
        let frame = sample_sensors(&plant, &mut noise);
        observer.ingest(&frame)?;
        let estimate = observer.estimate()?.modules[index].top_center;
        let truth = plant.ground_truth()?.modules[index].top_center;
        let max_tilt_rad = plant
            .true_readings
            .iter()
            .map(resultant_tilt)
            .fold(0.0, f64::max);
        samples.push(Sample {
            t_ms: plant.time_ms,
            estimate,
            truth,
            max_tilt_rad,
        });
    }
    Ok(EvalRun { samples, diverged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
    /// Planar euclidean norm of the X and Y errors.
    Global,
}

/// One row of the error table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    /// Sample standard deviation of |e|.
    pub std_mm: f64,
    /// Sample standard deviation of the signed error.
    pub std_signed_mm: f64,
    pub max_mae_mm: f64,
    pub q1_mm: f64,
    pub q3_mm: f64,
    pub sample_count: usize,
}

/// Percentile of sorted data with linear interpolation between order
/// statistics (position `p·(n − 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Statistics of a series of signed errors.
pub fn stats_from_errors(errors: &[f64]) -> Result<ErrorRow, EvalError> {
    if errors.len() < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            got: errors.len(),
        });
    }
    let n = errors.len() as f64;
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std_mm = sample_std(&abs);
    let std_signed_mm = sample_std(errors);
    abs.sort_by(f64::total_cmp);
    Ok(ErrorRow {
        mae_mm: mae,
        rmse_mm: rmse,
        std_mm,
        std_signed_mm,
        max_mae_mm: abs[abs.len() - 1],
        q1_mm: percentile(&abs, 0.25),
        q3_mm: percentile(&abs, 0.75),
        sample_count: errors.len(),
    })
}

pub fn axis_errors(samples: &[Sample], axis: Axis) -> Vec<f64> {
    samples
        .iter()
        .map(|s| {
            let e = s.estimate - s.truth;
            match axis {
                Axis::X => e.x,
                Axis::Y => e.y,
                Axis::Z => e.z,
                Axis::Global => e.x.hypot(e.y),
            }
        })
        .collect()
}

pub fn compute_stats(samples: &[Sample], axis: Axis) -> Result<ErrorRow, EvalError> {
    stats_from_errors(&axis_errors(samples, axis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub x: ErrorRow,
    pub y: ErrorRow,
    pub global: ErrorRow,
    /// Vertical error; not part of the planar table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<ErrorRow>,
}

impl ErrorReport {
    pub fn from_samples(samples: &[Sample]) -> Result<Self, EvalError> {
        Ok(Self {
            x: compute_stats(samples, Axis::X)?,
            y: compute_stats(samples, Axis::Y)?,
            global: compute_stats(samples, Axis::Global)?,
            z: Some(compute_stats(samples, Axis::Z)?),
        })
    }

    fn rows(&self) -> Vec<(&'static str, &ErrorRow)> {
        let mut rows = vec![("x", &self.x), ("y", &self.y), ("global", &self.global)];
        if let Some(z) = &self.z {
            rows.push(("z_extra", z));
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        if self.rows().iter().any(|(_, r)| r.sample_count == 0) {
            return Err(EvalError::EmptyReport);
        }
        let mut out = String::from("metric,mae,rmse,std,max_mae,q1,q3\n");
        for (name, r) in self.rows() {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                fmt_decimal(r.mae_mm),
                fmt_decimal(r.rmse_mm),
                fmt_decimal(r.std_mm),
                fmt_decimal(r.max_mae_mm),
                fmt_decimal(r.q1_mm),
                fmt_decimal(r.q3_mm),
            );
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        if self.rows().iter().any(|(_, r)| r.sample_count == 0) {
            return Err(EvalError::EmptyReport);
        }
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` selects JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

/// Writes the report; nothing is created when the report is empty.
pub fn emit_report(report: &ErrorReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub fn samples_csv(samples: &[Sample]) -> String {
    let mut out = String::from("t_ms,est_x,est_y,est_z,true_x,true_y,true_z\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.t_ms,
            fmt_decimal(s.estimate.x),
            fmt_decimal(s.estimate.y),
            fmt_decimal(s.estimate.z),
            fmt_decimal(s.truth.x),
            fmt_decimal(s.truth.y),
            fmt_decimal(s.truth.z),
        );
    }
    out
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
