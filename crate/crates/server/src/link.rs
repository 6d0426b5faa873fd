//! Plant connection as seen by the core task.

use std::str::FromStr;

use anyhow::Context;
use teleop_core::geometry::{feasible_height_range, REFERENCE_REST_HEIGHT_MM};
use teleop_core::plant::{PlantLink, PlantState, SimPlant};
use teleop_core::{ModuleReading, ModuleSpec, SystemConfig};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::transport::{spawn_line_pumps, Incoming};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlantSource {
    /// Simulator stepped in-process by the core task.
    Sim,
    /// Remote `teleop sim` reached over TCP.
    Tcp(String),
}

impl FromStr for PlantSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Self::Sim),
            _ => match s.strip_prefix("tcp:") {
                Some(addr) if !addr.is_empty() => Ok(Self::Tcp(addr.to_owned())),
                _ => Err(format!("expected `sim` or `tcp:<addr>`, got `{s}`")),
            },
        }
    }
}

/// Straight modules at the reference rest height, pulled into each module's
/// feasible range.
pub fn rest_pose(specs: &[ModuleSpec]) -> Vec<ModuleReading> {
    specs
        .iter()
        .map(|s| {
            let h = feasible_height_range(s, 0.0, 0.0)
                .map(|(lo, hi)| REFERENCE_REST_HEIGHT_MM.clamp(lo, hi))
                .unwrap_or(REFERENCE_REST_HEIGHT_MM);
            ModuleReading::new(h, 0.0, 0.0)
        })
        .collect()
}

pub fn sim_plant(config: &SystemConfig, specs: &[ModuleSpec]) -> SimPlant {
    let state = PlantState::new(specs.to_vec(), rest_pose(specs), config.plant_mode);
    SimPlant::new(state, config.noise)
}

pub enum PlantHandle {
    Sim(Box<SimPlant>),
    Remote {
        commands: mpsc::UnboundedSender<String>,
        lines: mpsc::Receiver<Incoming>,
    },
}

impl PlantHandle {
    pub async fn connect(source: &PlantSource, config: &SystemConfig) -> anyhow::Result<Self> {
        match source {
            PlantSource::Sim => Ok(Self::Sim(Box::new(sim_plant(config, &config.modules)))),
            PlantSource::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .await
                    .with_context(|| format!("connecting to plant at {addr}"))?;
                stream.set_nodelay(true)?;
                let (lines, commands, _) = spawn_line_pumps(stream);
                Ok(Self::Remote { commands, lines })
            }
        }
    }

    /// Advances an in-process plant by `dt_ms` and collects every sensor
    /// line available now.
    pub fn poll(&mut self, dt_ms: u64) -> Vec<String> {
        match self {
            Self::Sim(plant) => plant.advance(dt_ms).into_iter().collect(),
            Self::Remote { lines, .. } => {
                let mut out = Vec::new();
                while let Ok(item) = lines.try_recv() {
                    if let Incoming::Line(l) = item {
                        out.push(l);
                    }
                }
                out
            }
        }
    }

    pub fn command(&mut self, line: &str) {
        match self {
            Self::Sim(plant) => {
                if let Err(e) = plant.send_command(line) {
                    log::warn!("plant rejected command: {e}");
                }
            }
            Self::Remote { commands, .. } => {
                if commands.send(line.to_owned()).is_err() {
                    log::warn!("plant link closed; command dropped");
                }
            }
        }
    }

    /// Puts an in-process plant back at rest with new geometry. A remote
    /// plant keeps its own configuration.
    pub fn reconfigure(&mut self, config: &SystemConfig, specs: &[ModuleSpec]) {
        if let Self::Sim(plant) = self {
            **plant = sim_plant(config, specs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use teleop_core::geometry::reference_robot;

    #[test]
    fn plant_source_parsing() {
        assert_eq!("sim".parse(), Ok(PlantSource::Sim));
        assert_eq!("tcp:127.0.0.1:9100".parse(), Ok(PlantSource::Tcp("127.0.0.1:9100".into())));
        assert!("tcp:".parse::<PlantSource>().is_err());
        assert!("serial".parse::<PlantSource>().is_err());
    }

    #[test]
    fn rest_pose_respects_bounds() {
        assert!(rest_pose(&reference_robot()).iter().all(|r| r.h_mm == REFERENCE_REST_HEIGHT_MM));
        let short = ModuleSpec {
            min_len_mm: 10.0,
            max_len_mm: 20.0,
            ..ModuleSpec::default()
        };
        assert_eq!(rest_pose(&[short])[0].h_mm, 20.0);
    }
}
