use std::f64::consts::FRAC_PI_2;

use approx::assert_abs_diff_eq;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use teleop_core::eval::{percentile, stats_from_errors};
use teleop_core::filtering::{filter_series, kalman_step, KalmanParams};
use teleop_core::geometry::{
    actuator_lengths, compose_global, feasible_height_range, forward_chain, rotation_from_imu, top_vertices, Mat3,
};
use teleop_core::plant::inverse_module;
use teleop_core::{ModuleReading, ModuleSpec, Vec3};

fn angle() -> impl Strategy<Value = f64> {
    -(FRAC_PI_2 - 1e-3)..(FRAC_PI_2 - 1e-3)
}

fn spec() -> impl Strategy<Value = ModuleSpec> {
    (3usize..9, 5.0..40.0f64, 0.0..10.0f64).prop_map(|(n, r, d)| ModuleSpec {
        actuator_count: n,
        radius_mm: r,
        plate_offset_mm: d,
        ..ModuleSpec::default()
    })
}

fn reading() -> impl Strategy<Value = ModuleReading> {
    (1.0..100.0f64, angle(), angle()).prop_map(|(h, p, t)| ModuleReading::new(h, p, t))
}

/// Reading inside the default module's tilt and elongation limits.
fn in_limit_reading() -> impl Strategy<Value = ModuleReading> {
    let lim = 10f64.to_radians();
    (-lim..lim, -lim..lim, 0.0..1.0f64).prop_filter_map("no feasible height", |(p, t, u)| {
        let (lo, hi) = feasible_height_range(&ModuleSpec::default(), p, t)?;
        Some(ModuleReading::new(lo + u * (hi - lo), p, t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn imu_rotation_is_proper(phi in angle(), theta in angle()) {
        let r = rotation_from_imu(phi, theta);
        prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        let expected = (Rotation3::from_axis_angle(&Vector3::y_axis(), phi)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), theta))
            .into_inner();
        prop_assert!((r - expected).abs().max() < 1e-12);
    }

    #[test]
    fn top_centroid_sits_at_height(spec in spec(), r in reading()) {
        let top = top_vertices(&spec, &r);
        let centroid = top.iter().sum::<Vec3>() / top.len() as f64;
        prop_assert!((centroid - Vec3::new(0.0, 0.0, r.h_mm)).norm() < 1e-9);
    }

    #[test]
    fn untwisted_triangle_is_mirror_symmetric(h in 1.0..100.0f64, phi in angle(), l in 1.0..40.0f64) {
        let spec = ModuleSpec { radius_mm: l, ..ModuleSpec::default() };
        let lengths = actuator_lengths(&spec, &ModuleReading::new(h, phi, 0.0));
        prop_assert!((lengths[1] - lengths[2]).abs() < 1e-9);
    }

    #[test]
    fn lengths_are_invariant_under_placement(
        spec in spec(),
        n in 1usize..4,
        readings in prop::collection::vec(reading(), 4),
    ) {
        // Placement of module k is fixed by the modules before it; its own
        // lengths must not depend on that placement.
        let specs = vec![spec.clone(); n + 1];
        let pose = forward_chain(&specs, &readings[..n + 1]).unwrap();
        let local = actuator_lengths(&spec, &readings[n]);
        for (a, b) in pose.modules[n].actuator_lengths_mm.iter().zip(&local) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_is_consistent(
        spec in spec(),
        readings in prop::collection::vec(reading(), 1..10),
    ) {
        let specs = vec![spec.clone(); readings.len()];
        let pose = forward_chain(&specs, &readings).unwrap();
        for w in pose.modules.windows(2) {
            let expected = w[0].top_center + spec.plate_offset_mm * w[0].top_normal;
            prop_assert!((w[1].base_origin - expected).norm() < 1e-9);
        }
        for m in &pose.modules {
            prop_assert!((m.top_normal.norm() - 1.0).abs() < 1e-9);
            for ((t, b), l) in m.top_vertices.iter().zip(&m.base_vertices).zip(&m.actuator_lengths_mm) {
                prop_assert!(((t - b).norm() - l).abs() < 1e-9);
            }
        }
        prop_assert_eq!(pose.end_effector, pose.modules.last().unwrap().top_center);
    }

    #[test]
    fn composition_matches_brute_force(angles in prop::collection::vec((angle(), angle()), 1..10)) {
        let locals: Vec<Mat3> = angles.iter().map(|&(p, t)| rotation_from_imu(p, t)).collect();
        let globals = compose_global(&locals);
        for i in 0..locals.len() {
            let brute = locals[..=i].iter().fold(Mat3::identity(), |acc, r| acc * r);
            prop_assert!((globals[i] - brute).abs().max() < 1e-12);
        }
    }

    #[test]
    fn inverse_module_round_trip(r in in_limit_reading()) {
        let spec = ModuleSpec::default();
        let sol = inverse_module(&spec, &actuator_lengths(&spec, &r)).unwrap();
        prop_assert!(sol.converged);
        prop_assert!((sol.reading.h_mm - r.h_mm).abs() < 1e-4);
        prop_assert!((sol.reading.phi_rad - r.phi_rad).abs() < 1e-4);
        prop_assert!((sol.reading.theta_rad - r.theta_rad).abs() < 1e-4);
    }

    #[test]
    fn stats_rows_are_ordered(errors in prop::collection::vec(-50.0..50.0f64, 2..200)) {
        let row = stats_from_errors(&errors).unwrap();
        prop_assert!(row.rmse_mm + 1e-12 >= row.mae_mm);
        prop_assert!(row.mae_mm >= 0.0);
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let median = percentile(&abs, 0.5);
        prop_assert!(row.q1_mm <= median && median <= row.q3_mm && row.q3_mm <= row.max_mae_mm);
    }

    #[test]
    fn series_is_a_fold_of_steps(zs in prop::collection::vec(-100.0..100.0f64, 1..100)) {
        let p = KalmanParams::default();
        let out = filter_series(&p, &zs).unwrap();
        let mut state = p.initial_state(zs[0]);
        prop_assert_eq!(out[0], zs[0]);
        for (i, &z) in zs.iter().enumerate().skip(1) {
            state = kalman_step(state, &p, z).unwrap();
            prop_assert_eq!(out[i], state.x);
        }
    }
}

#[test]
fn covariance_reaches_fixed_point_from_any_start() {
    let p = KalmanParams::default();
    let fixed = p.steady_state_covariance();
    assert_abs_diff_eq!(fixed * fixed + p.q * fixed - p.q * p.r, 0.0, epsilon = 1e-15);
    for p0 in [0.0, 0.4, 10.0, 1e4] {
        let mut s = teleop_core::filtering::KalmanState { x: 0.0, p: p0 };
        for _ in 0..200 {
            s = kalman_step(s, &p, 1.0).unwrap();
        }
        assert_abs_diff_eq!(s.p, fixed, epsilon = 1e-12);
    }
}
