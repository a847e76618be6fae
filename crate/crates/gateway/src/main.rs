use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use bonik_core::bench::{csv_string, run_matrix, MatrixConfig, WorkloadConfig};
use bonik_core::gateway::{Dapp, GatewayConfig, SystemClock};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Interactive,
    Bench,
}

/// BONIK gateway: chat banking over a permissioned ledger.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// JSON gateway configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "interactive")]
    mode: Mode,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// NDJSON ledger file; overrides the config.
    #[arg(long)]
    ledger_path: Option<PathBuf>,
}

fn load_config(args: &Args) -> Result<GatewayConfig, String> {
    let mut cfg = match &args.config {
        Some(p) => GatewayConfig::load(p).map_err(|e| e.to_string())?,
        None => GatewayConfig::default(),
    };
    if let Some(p) = &args.ledger_path {
        cfg.ledger_path = Some(p.clone());
    }
    if let Ok(secret) = std::env::var("BONIK_NLU_SECRET") {
        cfg.nlu_secret = Some(secret);
    }
    Ok(cfg)
}

fn bench(cfg: &GatewayConfig) -> Result<(), String> {
    let matrix = MatrixConfig {
        base: WorkloadConfig { latency: cfg.network.latency, batch: cfg.network.batch, ..WorkloadConfig::default() },
        ..MatrixConfig::default()
    };
    let report = run_matrix(&matrix);
    for c in report.failed_cells() {
        eprintln!("cell {} {} {} failed: {}", c.workload, c.users, c.topology, c.outcome.as_ref().unwrap_err());
    }
    for t in &report.trends {
        eprintln!("trend ({}) {}: {} [{}]", t.id, t.description, if t.passed { "PASS" } else { "FAIL" }, t.detail);
    }
    print!("{}", csv_string(&report.reports()).map_err(|e| e.to_string())?);
    Ok(())
}

async fn interactive(cfg: GatewayConfig, listen: SocketAddr) -> Result<(), String> {
    let dapp = Arc::new(Dapp::open(&cfg, Arc::new(SystemClock)).map_err(|e| e.to_string())?);
    let listener = tokio::net::TcpListener::bind(listen).await.map_err(|e| format!("{listen}: {e}"))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    bonik_gateway::serve(listener, dapp, shutdown).await.map_err(|e| e.to_string())
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let result = match load_config(&args) {
        Ok(cfg) => match args.mode {
            Mode::Bench => bench(&cfg),
            Mode::Interactive => interactive(cfg, args.listen).await,
        },
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
