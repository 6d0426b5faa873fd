//! State estimation, simulation and control for modular parallel pneumatic
//! soft manipulators.
//!
//! - [`geometry`]: rigid-rod kinematics of a chain of parallel-actuator modules.
//! - [`filtering`]: scalar Kalman smoothing of the height channel.
//! - [`observer`]: sensor line parsing and the pose estimation pipeline.
//! - [`plant`]: simulated robot and ground truth.
//! - [`controller`]: inverse kinematics and the position PID loop.
//! - [`eval`]: observer error statistics over a trajectory.

pub mod config;
pub mod controller;
pub mod eval;
pub mod filtering;
pub mod geometry;
pub mod observer;
pub mod plant;

pub use config::SystemConfig;
pub use geometry::{ModuleReading, ModuleSpec, RobotPose, Vec3};
