//! Squid `external_acl_type` helper. Reads one `%SRC` per line on stdin and
//! answers `OK user=<name>` or `ERR` on stdout.

use std::io;

use clap::Parser;

use ipgate::helper::run_helper_loop;
use ipgate::session::{ReconnectingStore, StoreLocator};
use ipgate::SystemClock;

#[derive(Parser)]
#[command(version, about = "Squid external ACL helper answering from the ipgate session store")]
struct Cli {
    /// Group a session's user must belong to.
    #[arg(short, long, default_value = "internet")]
    group: String,
    /// `sqlite:<path>` shared with the login service.
    #[arg(short, long)]
    store: StoreLocator,
    /// Drop sessions idle for this many seconds.
    #[arg(long)]
    inactivity: Option<u64>,
}

fn main() -> io::Result<()> {
    let cli = Cli::parse();
    // stdout carries the protocol, so logs go to stderr (Squid's cache.log)
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(io::stderr)
        .init();
    let store = ReconnectingStore::new(cli.store, cli.inactivity);
    run_helper_loop(io::stdin().lock(), io::stdout().lock(), &cli.group, &store, &SystemClock)
}
