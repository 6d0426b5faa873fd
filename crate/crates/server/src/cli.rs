use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use teleop_core::eval::{emit_report, run_eval, samples_csv, ErrorReport, ReportFormat, TrajectorySpec};
use teleop_core::plant::PlantMode;
use teleop_core::SystemConfig;

use crate::link::PlantSource;
use crate::service::{ServeOptions, DEFAULT_PORT, DEFAULT_WS_PORT};

#[derive(Debug, Parser)]
#[command(name = "teleop", version, about = "Teleoperation service for modular soft manipulators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the operator service.
    Serve(ServeArgs),
    /// Run a real-time plant simulator on a TCP port.
    Sim(SimArgs),
    /// Evaluate observer accuracy on a simulated trajectory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "TELEOP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "TELEOP_BIND", default_value = "0.0.0.0")]
    pub bind: IpAddr,
    #[arg(long, env = "TELEOP_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// WebSocket bridge port; 0 disables the bridge.
    #[arg(long, env = "TELEOP_WS_PORT", default_value_t = DEFAULT_WS_PORT)]
    pub ws_port: u16,
    /// `sim` or `tcp:<addr>`.
    #[arg(long, env = "TELEOP_PLANT", default_value = "sim")]
    pub plant: PlantSource,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, env = "TELEOP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "TELEOP_LISTEN", default_value = "127.0.0.1:9100")]
    pub listen: SocketAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Chord,
    Cc,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "TELEOP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Trajectory JSON file or `builtin:circle` / `builtin:lemniscate`.
    #[arg(long, env = "TELEOP_TRAJ", default_value = "builtin:circle")]
    pub traj: String,
    #[arg(long, env = "TELEOP_DURATION_S")]
    pub duration_s: Option<f64>,
    #[arg(long, env = "TELEOP_PERIOD_MS")]
    pub period_ms: Option<u64>,
    #[arg(long, env = "TELEOP_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TELEOP_MODE", value_enum)]
    pub mode: Option<ModeArg>,
    /// Report path; `.json` selects JSON, anything else CSV. Printed to
    /// stdout when absent.
    #[arg(long, env = "TELEOP_OUT")]
    pub out: Option<PathBuf>,
    /// Per-sample estimate/truth CSV.
    #[arg(long, env = "TELEOP_DUMP")]
    pub dump: Option<PathBuf>,
}

pub fn load_config(path: Option<&PathBuf>) -> anyhow::Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SystemConfig::default()),
    }
}

impl ServeArgs {
    pub fn options(&self) -> anyhow::Result<ServeOptions> {
        Ok(ServeOptions {
            config: load_config(self.config.as_ref())?,
            tcp_addr: SocketAddr::new(self.bind, self.port),
            ws_addr: (self.ws_port != 0).then(|| SocketAddr::new(self.bind, self.ws_port)),
            plant: self.plant.clone(),
        })
    }
}

impl EvalArgs {
    pub fn trajectory(&self) -> anyhow::Result<TrajectorySpec> {
        let mut traj = match self.traj.strip_prefix("builtin:") {
            Some(name) => TrajectorySpec::builtin(name).with_context(|| format!("unknown builtin trajectory `{name}`"))?,
            None => {
                let text = std::fs::read_to_string(&self.traj).with_context(|| format!("reading {}", self.traj))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", self.traj))?
            }
        };
        if let Some(d) = self.duration_s {
            traj.duration_s = d;
        }
        if let Some(p) = self.period_ms {
            traj.sample_period_ms = p;
        }
        Ok(traj)
    }

    pub fn system_config(&self) -> anyhow::Result<SystemConfig> {
        let mut config = load_config(self.config.as_ref())?;
        if let Some(seed) = self.seed {
            config.noise.seed = seed;
        }
        match self.mode {
            Some(ModeArg::Chord) => config.plant_mode = PlantMode::Chord,
            Some(ModeArg::Cc) => config.plant_mode = PlantMode::ConstantCurvature,
            None => {}
        }
        Ok(config)
    }

    /// Runs the evaluation and writes its outputs; returns the CSV report.
    pub fn run(&self) -> anyhow::Result<String> {
        let config = self.system_config()?;
        let traj = self.trajectory()?;
        let run = run_eval(&config, &traj)?;
        if run.diverged {
            log::warn!("part of the trajectory was unreachable");
        }
        let report = ErrorReport::from_samples(&run.samples)?;
        if let Some(out) = &self.out {
            emit_report(&report, ReportFormat::from_path(out), out)?;
        }
        if let Some(dump) = &self.dump {
            std::fs::write(dump, samples_csv(&run.samples))?;
        }
        Ok(report.to_csv()?)
    }
}
