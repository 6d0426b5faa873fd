//! Teleoperation service: newline-delimited JSON over TCP (and a WebSocket
//! bridge for browsers), a single core task driving observer, controller and
//! plant, and the `teleop` command-line tools.

pub mod cli;
pub mod link;
pub mod protocol;
pub mod service;
pub mod session;
pub mod sim;
pub mod snapshot;
pub mod transport;
