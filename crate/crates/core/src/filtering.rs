//! Scalar smoothing for the time-of-flight height channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("measurement is not finite")]
    NonFiniteMeasurement,
    #[error("invalid filter parameters: {0}")]
    InvalidParams(&'static str),
    #[error("window is empty")]
    EmptyWindow,
}

/// Process and measurement variances of the constant-state model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanParams {
    pub q: f64,
    pub r: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self { q: 0.01, r: 0.40 }
    }
}

impl KalmanParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.q.is_finite() && self.q > 0.0) {
            return Err(FilterError::InvalidParams("q must be positive"));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(FilterError::InvalidParams("r must be positive"));
        }
        Ok(())
    }

    /// Fixed point of the posterior covariance: positive root of
    /// `p² + q·p − q·r = 0`.
    pub fn steady_state_covariance(&self) -> f64 {
        let (q, r) = (self.q, self.r);
        (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0
    }

    /// Gain applied once the covariance has converged.
    pub fn steady_state_gain(&self) -> f64 {
        let prior = self.steady_state_covariance() + self.q;
        prior / (prior + self.r)
    }

    /// State seeded from the first measurement, with covariance `r`.
    pub fn initial_state(&self, z: f64) -> KalmanState {
        KalmanState { x: z, p: self.r }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub x: f64,
    pub p: f64,
}

/// One predict/update cycle of the scalar constant-state filter.
pub fn kalman_step(state: KalmanState, params: &KalmanParams, z: f64) -> Result<KalmanState, FilterError> {
    if !z.is_finite() {
        return Err(FilterError::NonFiniteMeasurement);
    }
    let prior = state.p + params.q;
    let gain = prior / (prior + params.r);
    Ok(KalmanState {
        x: state.x + gain * (z - state.x),
        p: (1.0 - gain) * prior,
    })
}

pub fn mean_filter(window: &[f64]) -> Result<f64, FilterError> {
    if window.is_empty() {
        return Err(FilterError::EmptyWindow);
    }
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Estimates after each measurement. The first measurement seeds the state.
pub fn filter_series(params: &KalmanParams, zs: &[f64]) -> Result<Vec<f64>, FilterError> {
    let mut out = Vec::with_capacity(zs.len());
    let mut state: Option<KalmanState> = None;
    for &z in zs {
        let next = match state {
            None if z.is_finite() => params.initial_state(z),
            None => return Err(FilterError::NonFiniteMeasurement),
            Some(s) => kalman_step(s, params, z)?,
        };
        out.push(next.x);
        state = Some(next);
    }
    Ok(out)
}

/// Height-channel treatment in the observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeightFilter {
    Kalman(KalmanParams),
    /// Heights reach the kinematics unfiltered.
    #[serde(rename = "none")]
    Passthrough,
}

impl Default for HeightFilter {
    fn default() -> Self {
        Self::Kalman(KalmanParams::default())
    }
}

/// Lazily seeded filter for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelFilter {
    params: KalmanParams,
    state: Option<KalmanState>,
}

impl ChannelFilter {
    pub fn new(params: KalmanParams) -> Self {
        Self { params, state: None }
    }

    pub fn update(&mut self, z: f64) -> Result<f64, FilterError> {
        let next = match self.state {
            None if z.is_finite() => self.params.initial_state(z),
            None => return Err(FilterError::NonFiniteMeasurement),
            Some(s) => kalman_step(s, &self.params, z)?,
        };
        self.state = Some(next);
        Ok(next.x)
    }

    pub fn state(&self) -> Option<KalmanState> {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_fixture() {
        let s = kalman_step(KalmanState { x: 0.0, p: 1.0 }, &KalmanParams::default(), 10.0).unwrap();
        // p⁻ = 1.01, k = 1.01 / 1.41
        assert_abs_diff_eq!(s.x, 7.163120567375886, epsilon = 1e-12);
        assert_abs_diff_eq!(s.p, 0.28652482269503554, epsilon = 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_estimate() {
        let params = KalmanParams { q: 0.3, r: 2.0 };
        let s = kalman_step(KalmanState { x: 5.0, p: 0.1 }, &params, 5.0).unwrap();
        assert_eq!(s.x, 5.0);
    }

    #[test]
    fn distrusted_measurement_barely_moves() {
        let params = KalmanParams { q: 0.01, r: 1e6 };
        let s = kalman_step(KalmanState { x: 0.0, p: 1.0 }, &params, 10.0).unwrap();
        assert!(s.x.abs() < 1e-4);
    }

    #[test]
    fn non_finite_measurement_rejected() {
        let st = KalmanState { x: 1.0, p: 1.0 };
        assert_eq!(
            kalman_step(st, &KalmanParams::default(), f64::NAN),
            Err(FilterError::NonFiniteMeasurement)
        );
        let mut ch = ChannelFilter::new(KalmanParams::default());
        ch.update(40.0).unwrap();
        assert!(ch.update(f64::INFINITY).is_err());
        assert_eq!(ch.state().unwrap().x, 40.0);
    }

    #[test]
    fn mean_filter_fixtures() {
        assert_eq!(mean_filter(&[40.0, 40.0, 40.0]).unwrap(), 40.0);
        assert_eq!(mean_filter(&[40.0, 40.0, 100.0]).unwrap(), 60.0);
        assert_eq!(mean_filter(&[3.5]).unwrap(), 3.5);
        assert_eq!(mean_filter(&[]), Err(FilterError::EmptyWindow));
    }

    #[test]
    fn series_fixtures() {
        let p = KalmanParams::default();
        assert_eq!(filter_series(&p, &[42.0; 20]).unwrap(), vec![42.0; 20]);
        assert!(filter_series(&p, &[]).unwrap().is_empty());

        let zs = [0.0, 10.0, 3.0, -2.0];
        let out = filter_series(&p, &zs).unwrap();
        let mut st = p.initial_state(zs[0]);
        assert_eq!(out[0], 0.0);
        for (i, &z) in zs.iter().enumerate().skip(1) {
            st = kalman_step(st, &p, z).unwrap();
            assert_eq!(out[i], st.x);
        }
    }

    #[test]
    fn steady_state_values() {
        let p = KalmanParams::default();
        assert_abs_diff_eq!(p.steady_state_covariance(), 0.0584428877022476, epsilon = 1e-15);
        assert_abs_diff_eq!(p.steady_state_gain(), 0.146107219255619, epsilon = 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(KalmanParams::default().validate().is_ok());
        assert!(KalmanParams { q: 0.0, r: 1.0 }.validate().is_err());
        assert!(KalmanParams { q: 1.0, r: -1.0 }.validate().is_err());
    }
}
