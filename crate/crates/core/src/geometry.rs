//! Kinematic model of a chain of parallel-actuator modules.
//!
//! Each module is a base plate, `n` extensible rods on a circle of radius `L`
//! and a top plate. The top plate pivots about its fixed central point, which
//! sits at the mean actuator height `h` on the module's local Z axis. Modules
//! are stacked rigidly: the next base centre lies a distance `d` along the
//! previous top-plate normal, and local rotations compose left to right.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Round-off allowed on elongation bounds by [`ModuleSpec::admits`].
pub const LENGTH_SLACK_MM: f64 = 1e-9;

/// Tolerance on `‖n‖ = 1` accepted by [`next_base_origin`].
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid module spec: {0}")]
    InvalidSpec(String),
    #[error("invalid reading: {0}")]
    InvalidReading(String),
    #[error("normal is not unit length (|n| = {0})")]
    NonUnitNormal(f64),
    #[error("expected {expected} readings, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("module chain is empty")]
    EmptyChain,
}

/// Geometry and actuator limits of one module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    #[serde(rename = "actuators")]
    pub actuator_count: usize,
    /// Circumradius of the actuator polygon.
    pub radius_mm: f64,
    /// Rigid separation between a top plate and the next module's base.
    pub plate_offset_mm: f64,
    pub min_len_mm: f64,
    pub max_len_mm: f64,
    #[serde(default = "default_tilt_limit")]
    pub tilt_limit_deg: f64,
}

fn default_tilt_limit() -> f64 {
    10.0
}

impl Default for ModuleSpec {
    fn default() -> Self {
        Self {
            actuator_count: 3,
            radius_mm: 15.0,
            plate_offset_mm: 2.5,
            min_len_mm: 30.0,
            max_len_mm: 60.0,
            tilt_limit_deg: 10.0,
        }
    }
}

impl ModuleSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidSpec(msg.to_owned()));
        let all_finite = [
            self.radius_mm,
            self.plate_offset_mm,
            self.min_len_mm,
            self.max_len_mm,
            self.tilt_limit_deg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite field");
        }
        if self.actuator_count < 3 {
            return bad("actuator count must be at least 3");
        }
        if self.radius_mm <= 0.0 {
            return bad("radius must be positive");
        }
        if self.plate_offset_mm < 0.0 {
            return bad("plate offset must be non-negative");
        }
        if !(self.min_len_mm > 0.0 && self.min_len_mm < self.max_len_mm) {
            return bad("elongation bounds must satisfy 0 < min < max");
        }
        if self.tilt_limit_deg <= 0.0 || self.tilt_limit_deg >= 90.0 {
            return bad("tilt limit must lie in (0, 90) degrees");
        }
        Ok(())
    }

    pub fn tilt_limit_rad(&self) -> f64 {
        self.tilt_limit_deg.to_radians()
    }

    /// True when the reading respects the tilt limit and every implied
    /// actuator length lies inside the elongation bounds.
    pub fn admits(&self, reading: &ModuleReading) -> bool {
        let lim = self.tilt_limit_rad();
        reading.phi_rad.abs() <= lim
            && reading.theta_rad.abs() <= lim
            && actuator_lengths(self, reading)
                .iter()
                .all(|&l| l >= self.min_len_mm - LENGTH_SLACK_MM && l <= self.max_len_mm + LENGTH_SLACK_MM)
    }
}

/// One module's sensor state: TOF height and IMU tilts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleReading {
    pub h_mm: f64,
    pub phi_rad: f64,
    pub theta_rad: f64,
}

impl ModuleReading {
    pub fn new(h_mm: f64, phi_rad: f64, theta_rad: f64) -> Self {
        Self {
            h_mm,
            phi_rad,
            theta_rad,
        }
    }

    pub fn from_degrees(h_mm: f64, phi_deg: f64, theta_deg: f64) -> Self {
        Self::new(h_mm, phi_deg.to_radians(), theta_deg.to_radians())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.h_mm.is_finite() && self.phi_rad.is_finite() && self.theta_rad.is_finite()) {
            return Err(GeometryError::InvalidReading("non-finite field".into()));
        }
        if self.h_mm <= 0.0 {
            return Err(GeometryError::InvalidReading("height must be positive".into()));
        }
        if self.phi_rad.abs() >= FRAC_PI_2 || self.theta_rad.abs() >= FRAC_PI_2 {
            return Err(GeometryError::InvalidReading(
                "tilt must be strictly inside (-90, 90) degrees".into(),
            ));
        }
        Ok(())
    }
}

/// Pose of one module in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulePose {
    pub base_origin: Vec3,
    pub rotation_local: Mat3,
    pub rotation_global: Mat3,
    pub base_vertices: Vec<Vec3>,
    pub top_vertices: Vec<Vec3>,
    pub top_center: Vec3,
    pub top_normal: Vec3,
    pub actuator_lengths_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotPose {
    pub modules: Vec<ModulePose>,
    pub end_effector: Vec3,
}

impl RobotPose {
    /// Global top-plate centre of module `index`.
    pub fn platform_center(&self, index: usize) -> Option<Vec3> {
        self.modules.get(index).map(|m| m.top_center)
    }
}

/// Actuator attachment points on the base plate, module-local.
///
/// Vertex `k` sits at polar angle `2πk/n` on the circle of radius `L`, so for
/// three actuators the triangle has side `√3·L`.
pub fn base_vertices(spec: &ModuleSpec) -> Vec<Vec3> {
    let n = spec.actuator_count;
    let l = spec.radius_mm;
    (0..n)
        .map(|k| match (n, k) {
            // Closed form for the triangle, avoiding cos(2π/3) rounding.
            (3, 0) => Vec3::new(l, 0.0, 0.0),
            (3, 1) => Vec3::new(-l / 2.0, 3f64.sqrt() * l / 2.0, 0.0),
            (3, 2) => Vec3::new(-l / 2.0, -(3f64.sqrt()) * l / 2.0, 0.0),
            _ => {
                let a = 2.0 * PI * k as f64 / n as f64;
                Vec3::new(l * a.cos(), l * a.sin(), 0.0)
            }
        })
        .map(|mut v| {
            // Exact zeros for the axis-aligned vertices of even polygons.
            v.iter_mut().for_each(|c| {
                if c.abs() < 1e-12 * l {
                    *c = 0.0
                }
            });
            v
        })
        .collect()
}

/// Rotation of a module's top plate with respect to its base, from IMU tilts.
///
/// The entries are
///
/// ```text
/// [ cosφ   sinφ·sinθ   sinφ·cosθ ]
/// [ 0      cosθ        −sinθ     ]
/// [ −sinφ  cosφ·sinθ   cosφ·cosθ ]
/// ```
///
/// Algebraically this is `R_y(φ)·R_x(θ)`, so φ tips the normal towards +X and
/// θ towards −Y.
pub fn rotation_from_imu(phi_rad: f64, theta_rad: f64) -> Mat3 {
    let (sp, cp) = phi_rad.sin_cos();
    let (st, ct) = theta_rad.sin_cos();
    Mat3::new(
        cp,
        sp * st,
        sp * ct,
        0.0,
        ct,
        -st,
        -sp,
        cp * st,
        cp * ct,
    )
}

/// Top-plate attachment points, module-local: `R·b_k + (0, 0, h)`.
pub fn top_vertices(spec: &ModuleSpec, reading: &ModuleReading) -> Vec<Vec3> {
    let r = rotation_from_imu(reading.phi_rad, reading.theta_rad);
    let lift = Vec3::new(0.0, 0.0, reading.h_mm);
    base_vertices(spec).iter().map(|b| r * b + lift).collect()
}

pub fn actuator_lengths(spec: &ModuleSpec, reading: &ModuleReading) -> Vec<f64> {
    let r = rotation_from_imu(reading.phi_rad, reading.theta_rad);
    let lift = Vec3::new(0.0, 0.0, reading.h_mm);
    base_vertices(spec)
        .iter()
        .map(|b| (r * b + lift - b).norm())
        .collect()
}

/// Local top-plate centre and unit normal.
pub fn platform_center_normal(_spec: &ModuleSpec, reading: &ModuleReading) -> (Vec3, Vec3) {
    let r = rotation_from_imu(reading.phi_rad, reading.theta_rad);
    (Vec3::new(0.0, 0.0, reading.h_mm), r.column(2).into_owned())
}

pub fn next_base_origin(top_center: &Vec3, top_normal: &Vec3, d: f64) -> Result<Vec3, GeometryError> {
    let norm = top_normal.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORMAL_TOL {
        return Err(GeometryError::NonUnitNormal(norm));
    }
    Ok(top_center + top_normal * d)
}

/// Cumulative left-to-right products: output `i` is `R_0·R_1···R_i`.
pub fn compose_global(local_rotations: &[Mat3]) -> Vec<Mat3> {
    local_rotations
        .iter()
        .scan(Mat3::identity(), |acc, r| {
            *acc *= r;
            Some(*acc)
        })
        .collect()
}

/// Module geometry expressed in the module's own base frame.
///
/// [`forward_chain`] builds these from the rigid-rod model; other bending
/// models can supply their own and reuse [`chain_local_modules`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModule {
    pub rotation: Mat3,
    pub top_center: Vec3,
    pub base_vertices: Vec<Vec3>,
    pub top_vertices: Vec<Vec3>,
}

impl LocalModule {
    pub fn chord(spec: &ModuleSpec, reading: &ModuleReading) -> Self {
        let rotation = rotation_from_imu(reading.phi_rad, reading.theta_rad);
        let base = base_vertices(spec);
        let lift = Vec3::new(0.0, 0.0, reading.h_mm);
        let top = base.iter().map(|b| rotation * b + lift).collect();
        Self {
            rotation,
            top_center: lift,
            base_vertices: base,
            top_vertices: top,
        }
    }
}

/// Places a sequence of local modules in the global frame.
pub fn chain_local_modules(
    specs: &[ModuleSpec],
    locals: &[LocalModule],
) -> Result<RobotPose, GeometryError> {
    if specs.is_empty() {
        return Err(GeometryError::EmptyChain);
    }
    if specs.len() != locals.len() {
        return Err(GeometryError::LengthMismatch {
            expected: specs.len(),
            got: locals.len(),
        });
    }
    let rotations: Vec<Mat3> = locals.iter().map(|m| m.rotation).collect();
    let globals = compose_global(&rotations);

    let mut parent = Mat3::identity();
    let mut origin = Vec3::zeros();
    let mut modules = Vec::with_capacity(specs.len());
    for ((spec, local), global) in specs.iter().zip(locals).zip(&globals) {
        let place = |p: &Vec3| origin + parent * p;
        let base_vertices: Vec<Vec3> = local.base_vertices.iter().map(place).collect();
        let top_vertices: Vec<Vec3> = local.top_vertices.iter().map(place).collect();
        let actuator_lengths_mm = top_vertices
            .iter()
            .zip(&base_vertices)
            .map(|(t, b)| (t - b).norm())
            .collect();
        let top_center = place(&local.top_center);
        let top_normal = global.column(2).into_owned();
        modules.push(ModulePose {
            base_origin: origin,
            rotation_local: local.rotation,
            rotation_global: *global,
            base_vertices,
            top_vertices,
            top_center,
            top_normal,
            actuator_lengths_mm,
        });
        origin = next_base_origin(&top_center, &top_normal, spec.plate_offset_mm)?;
        parent = *global;
    }
    let end_effector = modules.last().map(|m| m.top_center).unwrap_or_default();
    Ok(RobotPose {
        modules,
        end_effector,
    })
}

/// Full robot pose from per-module readings under the rigid-rod model.
pub fn forward_chain(
    specs: &[ModuleSpec],
    readings: &[ModuleReading],
) -> Result<RobotPose, GeometryError> {
    if specs.len() != readings.len() {
        return Err(GeometryError::LengthMismatch {
            expected: specs.len(),
            got: readings.len(),
        });
    }
    let locals: Vec<LocalModule> = specs
        .iter()
        .zip(readings)
        .map(|(s, r)| LocalModule::chord(s, r))
        .collect();
    chain_local_modules(specs, &locals)
}

/// Global top-plate centre of module `index`, skipping everything the full
/// pose would compute beyond it.
pub fn platform_position(specs: &[ModuleSpec], readings: &[ModuleReading], index: usize) -> Vec3 {
    let mut parent = Mat3::identity();
    let mut origin = Vec3::zeros();
    for (i, (spec, reading)) in specs.iter().zip(readings).enumerate() {
        let top = origin + parent * Vec3::new(0.0, 0.0, reading.h_mm);
        if i == index {
            return top;
        }
        parent *= rotation_from_imu(reading.phi_rad, reading.theta_rad);
        origin = top + parent.column(2) * spec.plate_offset_mm;
    }
    origin
}

/// Clamps lengths into `[min_len, max_len]`; the flag marks saturated entries.
pub fn clamp_lengths(spec: &ModuleSpec, lengths: &[f64]) -> (Vec<f64>, Vec<bool>) {
    lengths
        .iter()
        .map(|&l| {
            let c = l.clamp(spec.min_len_mm, spec.max_len_mm);
            (c, c != l)
        })
        .unzip()
}

/// Closed height interval keeping every actuator of a module inside its
/// elongation bounds at the given tilt, or `None` when no height works.
pub fn feasible_height_range(spec: &ModuleSpec, phi_rad: f64, theta_rad: f64) -> Option<(f64, f64)> {
    let r = rotation_from_imu(phi_rad, theta_rad);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // l² = |v_xy|² + (v_z + h)² with v = R·b − b; monotone in h once v_z + h > 0.
    for b in base_vertices(spec) {
        let v = r * b - b;
        let lateral = v.x * v.x + v.y * v.y;
        let min_sq = spec.min_len_mm * spec.min_len_mm - lateral;
        let max_sq = spec.max_len_mm * spec.max_len_mm - lateral;
        if max_sq <= 0.0 {
            return None;
        }
        lo = lo.max(min_sq.max(0.0).sqrt() - v.z);
        hi = hi.min(max_sq.sqrt() - v.z);
    }
    lo = lo.max(f64::MIN_POSITIVE);
    (lo <= hi).then_some((lo, hi))
}

/// Two-module reference robot: default module geometry, 85 mm long at rest.
pub fn reference_robot() -> Vec<ModuleSpec> {
    vec![ModuleSpec::default(); 2]
}

/// Per-module rest height of the reference robot (41.25 + 2.5 + 41.25 = 85).
pub const REFERENCE_REST_HEIGHT_MM: f64 = 41.25;

pub fn rest_readings(specs: &[ModuleSpec], h_mm: f64) -> Vec<ModuleReading> {
    vec![ModuleReading::new(h_mm, 0.0, 0.0); specs.len()]
}
