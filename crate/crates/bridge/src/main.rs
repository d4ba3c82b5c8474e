use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use ase_bridge::{BridgeConfig, SessionManager};
use clap::Parser;

/// Serve grid-nav and lander episodes over WebSocket.
#[derive(Debug, Parser)]
#[command(name = "ase-bridge", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: SocketAddr,
    /// JSON bridge config; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    tick_hz: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    if let Err(e) = run(args).await {
        eprintln!("ase-bridge: {e}");
        std::process::exit(1);
    }
}

async fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let mut config = match &args.config {
        Some(path) => BridgeConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => BridgeConfig::default(),
    };
    if let Some(dir) = args.log_dir {
        config.log_dir = Some(dir);
    }
    if let Some(hz) = args.tick_hz {
        config.tick_hz = hz;
    }
    if let Some(seed) = args.seed {
        config.root_seed = seed;
    }
    let manager = Arc::new(SessionManager::new(config)?);
    ase_bridge::server::serve(manager, args.addr, |addr| eprintln!("listening on ws://{addr}/ws")).await?;
    Ok(())
}
