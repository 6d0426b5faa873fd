//! Stand-alone plant simulator speaking the sensor/command line protocol over
//! TCP, paced in real time.

use std::time::Duration;

use teleop_core::plant::PlantLink;
use teleop_core::SystemConfig;
use tokio::net::TcpListener;
use tokio::time::MissedTickBehavior;

use crate::link::sim_plant;
use crate::transport::{spawn_line_pumps, Incoming};

/// Serves one controller at a time. The plant keeps its state between
/// connections.
pub async fn run_sim(config: SystemConfig, listener: TcpListener) -> anyhow::Result<()> {
    config.validate()?;
    let mut plant = sim_plant(&config, &config.modules);
    let period = config.control.period_ms;
    let mut started = false;
    loop {
        let (stream, peer) = listener.accept().await?;
        stream.set_nodelay(true)?;
        log::info!("controller connected from {peer}");
        let (mut commands, sensors, _) = spawn_line_pumps(stream);
        let mut ticker = tokio::time::interval(Duration::from_millis(period));
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => {
                    let dt = if started { period } else { 0 };
                    started = true;
                    if let Some(line) = plant.advance(dt) {
                        if sensors.send(line).is_err() {
                            break;
                        }
                    }
                }
                item = commands.recv() => match item {
                    Some(Incoming::Line(line)) => {
                        if let Err(e) = plant.send_command(&line) {
                            log::warn!("bad command from {peer}: {e}");
                        }
                    }
                    Some(Incoming::TooLong) => log::warn!("overlong command from {peer}"),
                    None => break,
                },
            }
        }
        log::info!("controller {peer} disconnected");
    }
}
