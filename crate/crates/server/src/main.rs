use clap::Parser;
use teleop_server::cli::{load_config, Cli, Command};
use teleop_server::service::serve;
use teleop_server::sim::run_sim;

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve(args) => serve(args.options()?, ctrl_c()).await,
        Command::Sim(args) => {
            let config = load_config(args.config.as_ref())?;
            let listener = tokio::net::TcpListener::bind(args.listen).await?;
            log::info!("plant simulator on {}", listener.local_addr()?);
            tokio::select! {
                r = run_sim(config, listener) => r,
                _ = ctrl_c() => Ok(()),
            }
        }
        Command::Eval(args) => {
            print!("{}", tokio::task::spawn_blocking(move || args.run()).await??);
            Ok(())
        }
    }
}
