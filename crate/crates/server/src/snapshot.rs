use teleop_core::geometry::{forward_chain, ModulePose};
use teleop_core::{ModuleReading, ModuleSpec, RobotPose};

use crate::protocol::{wire_round, Message, ModuleState};
use crate::session::Fsm;

/// Immutable view of the core state at one broadcast instant. Connections
/// stamp it with their own sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t_ms: u64,
    pub fsm: Fsm,
    pub specs: Vec<ModuleSpec>,
    /// Filtered readings behind `pose`, if any frame has been ingested.
    pub readings: Option<Vec<ModuleReading>>,
    pub pose: Option<RobotPose>,
    pub stale: bool,
}

impl Snapshot {
    pub fn from_readings(t_ms: u64, fsm: Fsm, specs: Vec<ModuleSpec>, readings: Vec<ModuleReading>) -> Self {
        let pose = forward_chain(&specs, &readings).ok();
        Self {
            t_ms,
            fsm,
            specs,
            readings: Some(readings),
            pose,
            stale: false,
        }
    }
}

fn module_state(reading: Option<&ModuleReading>, pose: Option<&ModulePose>, spec: &ModuleSpec) -> ModuleState {
    let r = reading.copied().unwrap_or(ModuleReading {
        h_mm: 0.0,
        phi_rad: 0.0,
        theta_rad: 0.0,
    });
    let lengths = match pose {
        Some(p) => p.actuator_lengths_mm.iter().map(|&l| wire_round(l)).collect(),
        None => vec![0.0; spec.actuator_count],
    };
    ModuleState {
        phi_deg: wire_round(r.phi_rad.to_degrees()),
        theta_deg: wire_round(r.theta_rad.to_degrees()),
        h_mm: wire_round(r.h_mm),
        lengths_mm: lengths,
    }
}

/// State message for one connection. Without any estimate the payload is
/// zeros and `stale` is forced.
pub fn state_message(snap: &Snapshot, seq: u64) -> Message {
    let modules = snap
        .specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            module_state(
                snap.readings.as_ref().and_then(|r| r.get(i)),
                snap.pose.as_ref().and_then(|p| p.modules.get(i)),
                spec,
            )
        })
        .collect();
    let ee = snap.pose.as_ref().map(|p| p.end_effector).unwrap_or_default();
    Message::State {
        seq,
        t_ms: snap.t_ms,
        fsm: snap.fsm.code(),
        modules,
        ee_mm: [wire_round(ee.x), wire_round(ee.y), wire_round(ee.z)],
        stale: snap.stale || snap.pose.is_none(),
    }
}
