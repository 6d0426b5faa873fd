//! Sensor frames in, robot pose out.
//!
//! Line formats on the plant link (ASCII, newline-terminated):
//!
//! ```text
//! S,<t_ms>,<h1_mm>,<phi1_deg>,<theta1_deg>[,<h2_mm>,<phi2_deg>,<theta2_deg>,...]
//! C,<l1_mm>,...,<lM_mm>
//! ```

use thiserror::Error;

use crate::filtering::{ChannelFilter, FilterError, HeightFilter, KalmanParams};
use crate::geometry::{forward_chain, GeometryError, ModuleReading, ModuleSpec, RobotPose};

/// Frames older than this many sampling periods mark the pose stale.
pub const STALE_PERIODS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line does not start with tag {0:?}")]
    BadTag(char),
    #[error("expected {expected} fields, got {got}")]
    FieldCount { expected: String, got: usize },
    /// 1-based field index, counting the tag as field 1.
    #[error("field {index}: {reason}")]
    Field { index: usize, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObserverError {
    #[error("frame has {got} modules, observer is configured for {expected}")]
    ModuleCount { expected: usize, got: usize },
    #[error("timestamp went backwards ({prev} -> {got})")]
    NonMonotonic { prev: u64, got: u64 },
    #[error("no frame ingested yet")]
    NoEstimate,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub t_ms: u64,
    pub readings: Vec<ModuleReading>,
}

/// Fixed-point text with at most four fractional digits, at least one.
pub fn fmt_decimal(v: f64) -> String {
    let mut s = format!("{:.4}", v);
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    if s == "-0.0" {
        s.remove(0);
    }
    s
}

fn parse_field(raw: &str, index: usize) -> Result<f64, ParseError> {
    let v: f64 = raw.trim().parse().map_err(|_| ParseError::Field {
        index,
        reason: "not a number",
    })?;
    if !v.is_finite() {
        return Err(ParseError::Field {
            index,
            reason: "not finite",
        });
    }
    Ok(v)
}

/// Parses an `S,...` line. Angles arrive in degrees and leave in radians.
pub fn parse_sensor_line(line: &str) -> Result<SensorFrame, ParseError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = line.split(',').collect();
    if fields[0] != "S" {
        return Err(ParseError::BadTag('S'));
    }
    if fields.len() < 5 || (fields.len() - 2) % 3 != 0 {
        return Err(ParseError::FieldCount {
            expected: "2 + 3k (k >= 1)".into(),
            got: fields.len(),
        });
    }
    let t_ms = fields[1].trim().parse::<u64>().map_err(|_| ParseError::Field {
        index: 2,
        reason: "timestamp is not a non-negative integer",
    })?;
    let mut readings = Vec::with_capacity((fields.len() - 2) / 3);
    for (m, chunk) in fields[2..].chunks(3).enumerate() {
        let base = 3 + 3 * m;
        let h = parse_field(chunk[0], base)?;
        if h <= 0.0 {
            return Err(ParseError::Field {
                index: base,
                reason: "height must be positive",
            });
        }
        let angle = |offset: usize| -> Result<f64, ParseError> {
            let deg = parse_field(chunk[offset], base + offset)?;
            if deg.abs() >= 90.0 {
                return Err(ParseError::Field {
                    index: base + offset,
                    reason: "angle outside (-90, 90) degrees",
                });
            }
            Ok(deg.to_radians())
        };
        let phi = angle(1)?;
        let theta = angle(2)?;
        readings.push(ModuleReading::new(h, phi, theta));
    }
    Ok(SensorFrame { t_ms, readings })
}

pub fn format_sensor_line(frame: &SensorFrame) -> String {
    let mut s = format!("S,{}", frame.t_ms);
    for r in &frame.readings {
        s.push(',');
        s.push_str(&fmt_decimal(r.h_mm));
        s.push(',');
        s.push_str(&fmt_decimal(r.phi_rad.to_degrees()));
        s.push(',');
        s.push_str(&fmt_decimal(r.theta_rad.to_degrees()));
    }
    s.push('\n');
    s
}

pub fn format_command_line(lengths: &[f64]) -> String {
    let mut s = String::from("C");
    for &l in lengths {
        s.push(',');
        s.push_str(&fmt_decimal(l));
    }
    s.push('\n');
    s
}

pub fn parse_command_line(line: &str) -> Result<Vec<f64>, ParseError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut fields = line.split(',');
    if fields.next() != Some("C") {
        return Err(ParseError::BadTag('C'));
    }
    let lengths = fields
        .enumerate()
        .map(|(i, f)| {
            let v = parse_field(f, i + 2)?;
            if v <= 0.0 {
                return Err(ParseError::Field {
                    index: i + 2,
                    reason: "length must be positive",
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if lengths.is_empty() {
        return Err(ParseError::FieldCount {
            expected: "at least 2".into(),
            got: 1,
        });
    }
    Ok(lengths)
}

/// Owns the per-module height filters and the latest estimate.
///
/// IMU angles pass through unfiltered; each module's height runs through its
/// own Kalman channel before kinematics.
#[derive(Debug, Clone)]
pub struct ObserverState {
    specs: Vec<ModuleSpec>,
    filters: Option<Vec<ChannelFilter>>,
    filtered: Option<Vec<ModuleReading>>,
    last_frame_ms: Option<u64>,
    last_pose: Option<RobotPose>,
}

impl ObserverState {
    pub fn new(specs: Vec<ModuleSpec>, params: KalmanParams) -> Self {
        Self::with_filter(specs, HeightFilter::Kalman(params))
    }

    pub fn with_filter(specs: Vec<ModuleSpec>, filter: HeightFilter) -> Self {
        let filters = match filter {
            HeightFilter::Kalman(params) => Some(vec![ChannelFilter::new(params); specs.len()]),
            HeightFilter::Passthrough => None,
        };
        Self {
            specs,
            filters,
            filtered: None,
            last_frame_ms: None,
            last_pose: None,
        }
    }

    pub fn specs(&self) -> &[ModuleSpec] {
        &self.specs
    }

    pub fn ingest(&mut self, frame: &SensorFrame) -> Result<Vec<ModuleReading>, ObserverError> {
        if frame.readings.len() != self.specs.len() {
            return Err(ObserverError::ModuleCount {
                expected: self.specs.len(),
                got: frame.readings.len(),
            });
        }
        if let Some(prev) = self.last_frame_ms {
            if frame.t_ms < prev {
                return Err(ObserverError::NonMonotonic {
                    prev,
                    got: frame.t_ms,
                });
            }
        }
        // Validate everything before touching filter state.
        for r in &frame.readings {
            r.validate()?;
        }
        let filtered: Vec<ModuleReading> = match self.filters.as_mut() {
            Some(filters) => frame
                .readings
                .iter()
                .zip(filters.iter_mut())
                .map(|(r, f)| Ok(ModuleReading { h_mm: f.update(r.h_mm)?, ..*r }))
                .collect::<Result<_, FilterError>>()?,
            None => frame.readings.clone(),
        };
        self.last_frame_ms = Some(frame.t_ms);
        self.filtered = Some(filtered.clone());
        Ok(filtered)
    }

    pub fn estimate(&mut self) -> Result<&RobotPose, ObserverError> {
        let readings = self.filtered.as_ref().ok_or(ObserverError::NoEstimate)?;
        let pose = forward_chain(&self.specs, readings)?;
        Ok(self.last_pose.insert(pose))
    }

    pub fn filtered_readings(&self) -> Option<&[ModuleReading]> {
        self.filtered.as_deref()
    }

    pub fn last_pose(&self) -> Option<&RobotPose> {
        self.last_pose.as_ref()
    }

    pub fn last_frame_ms(&self) -> Option<u64> {
        self.last_frame_ms
    }

    /// No frame yet, or none within [`STALE_PERIODS`] sampling periods.
    pub fn is_stale(&self, now_ms: u64, period_ms: u64) -> bool {
        match self.last_frame_ms {
            None => true,
            Some(t) => now_ms.saturating_sub(t) > STALE_PERIODS * period_ms,
        }
    }
}
