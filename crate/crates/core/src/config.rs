//! System configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControlState, PidGains};
use crate::filtering::{HeightFilter, KalmanParams};
use crate::geometry::{reference_robot, GeometryError, ModuleSpec};
use crate::plant::{NoiseModel, PlantMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("module {index}: {source}")]
    Module { index: usize, source: GeometryError },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub i_max_mm: f64,
    pub tol_mm: f64,
    pub period_ms: u64,
    pub timeout_ms: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let g = PidGains::default();
        Self {
            kp: g.kp,
            ki: g.ki,
            kd: g.kd,
            i_max_mm: g.i_max_mm,
            tol_mm: 3.0,
            period_ms: 100,
            timeout_ms: 20_000,
        }
    }
}

impl ControlConfig {
    pub fn gains(&self) -> PidGains {
        PidGains {
            kp: self.kp,
            ki: self.ki,
            kd: self.kd,
            i_max_mm: self.i_max_mm,
        }
    }

    pub fn control_state(&self) -> ControlState {
        ControlState {
            tol_mm: self.tol_mm,
            timeout_ms: self.timeout_ms,
            ..ControlState::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub modules: Vec<ModuleSpec>,
    pub control: ControlConfig,
    pub noise: NoiseModel,
    pub plant_mode: PlantMode,
    pub filter: HeightFilter,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            modules: reference_robot(),
            control: ControlConfig::default(),
            noise: NoiseModel::default(),
            plant_mode: PlantMode::Chord,
            filter: HeightFilter::Kalman(KalmanParams::default()),
        }
    }
}

impl SystemConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.modules.is_empty() {
            return Err(ConfigError::Invalid("at least one module is required".into()));
        }
        for (index, m) in self.modules.iter().enumerate() {
            m.validate().map_err(|source| ConfigError::Module { index, source })?;
        }
        self.control
            .gains()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.control.tol_mm > 0.0) || self.control.period_ms == 0 {
            return Err(ConfigError::Invalid("tolerance and period must be positive".into()));
        }
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        if let HeightFilter::Kalman(p) = &self.filter {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"{ "modules": [ { "actuators": 3, "radius_mm": 15.0, "plate_offset_mm": 2.5,
            "min_len_mm": 30.0, "max_len_mm": 60.0, "tilt_limit_deg": 10.0 },
            { "actuators": 3, "radius_mm": 15.0, "plate_offset_mm": 2.5,
            "min_len_mm": 30.0, "max_len_mm": 60.0, "tilt_limit_deg": 10.0 } ],
            "control": { "kp":0.8,"ki":0.1,"kd":0.05,"tol_mm":3.0,"period_ms":100 },
            "noise": { "seed": 3 }, "plant_mode": "chord" }"#;
        let cfg = SystemConfig::from_json(text).unwrap();
        assert_eq!(cfg.modules, reference_robot());
        assert_eq!(cfg.control, ControlConfig::default());
        assert_eq!(cfg.noise.seed, 3);
        assert_eq!(cfg.noise.spike_prob, 0.05);
        assert_eq!(cfg.filter, HeightFilter::Kalman(KalmanParams::default()));
    }

    #[test]
    fn empty_object_is_default() {
        assert_eq!(SystemConfig::from_json("{}").unwrap(), SystemConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        let bad_module = r#"{"modules":[{"actuators":3,"radius_mm":15,"plate_offset_mm":2.5,"min_len_mm":60,"max_len_mm":30}]}"#;
        assert!(matches!(
            SystemConfig::from_json(bad_module),
            Err(ConfigError::Module { index: 0, .. })
        ));
        assert!(SystemConfig::from_json(r#"{"modules":[]}"#).is_err());
        assert!(SystemConfig::from_json(r#"{"control":{"kp":-1}}"#).is_err());
        assert!(SystemConfig::from_json(r#"{"noise":{"spike_prob":2}}"#).is_err());
        assert!(SystemConfig::from_json(r#"{"plant_mode":"wobbly"}"#).is_err());
    }

    #[test]
    fn mode_and_filter_spellings() {
        let cfg = SystemConfig::from_json(r#"{"plant_mode":"cc","filter":{"kind":"none"}}"#).unwrap();
        assert_eq!(cfg.plant_mode, PlantMode::ConstantCurvature);
        assert_eq!(cfg.filter, HeightFilter::Passthrough);
    }
}
