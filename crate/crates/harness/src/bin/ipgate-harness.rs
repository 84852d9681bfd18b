use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ipgate_harness::{bench_latency, run_scenario, BenchConfig, Scenario};

#[derive(Parser)]
#[command(version, about = "Scenario runner and latency bench for ipgate")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and print its transcript.
    Scenario { file: PathBuf },
    /// Measure added latency of the proxy path.
    Bench {
        #[arg(long, default_value_t = 25)]
        clients: usize,
        #[arg(long, default_value_t = 200)]
        requests: usize,
        /// Prime the session cache before timing (default).
        #[arg(long, conflicts_with = "cold")]
        warm: bool,
        /// Disable the session cache so every request queries the store.
        #[arg(long)]
        cold: bool,
        /// Extra time added to each store lookup, in microseconds.
        #[arg(long, default_value_t = 0)]
        store_delay_us: u64,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Scenario { file } => match Scenario::load(&file) {
            Ok(s) => {
                println!("topology: {}", s.topology.kind);
                println!("policy: {}", s.policy.mode);
                run_scenario(&s).await.map(|t| print!("{t}")).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        },
        Cmd::Bench {
            clients,
            requests,
            cold,
            store_delay_us,
            ..
        } => {
            let mut cfg = BenchConfig::new(clients, requests, !cold);
            if store_delay_us > 0 {
                cfg.store_delay = Some(Duration::from_micros(store_delay_us));
            }
            bench_latency(cfg).await.map(|s| print!("{s}")).map_err(|e| e.to_string())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
