use std::fs::OpenOptions;
use std::io::{self, BufRead};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tracing::info;

use ipgate::auth::{AuthServer, AuthService, CredentialBackend, FlatFileBackend, LdapBackend};
use ipgate::config::{BackendKind, Config};
use ipgate::proxy::{AccessLog, NullAccessLog, Proxy, ProxySettings, UpstreamConnector, WriterAccessLog};
use ipgate::session::open_store;
use ipgate::{AclEngine, SystemClock};

/// Intercepting HTTP proxy that admits clients by source IP after a web login.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[arg(short, long, default_value = "/etc/ipgate/ipgate.toml")]
    config: PathBuf,
    /// Validate the configuration and exit.
    #[arg(long)]
    check: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read a password from stdin and print its hash for the credentials file.
    HashPassword,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();

    if let Some(Cmd::HashPassword) = cli.command {
        let mut line = String::new();
        io::stdin().lock().read_line(&mut line)?;
        let password = line.trim_end_matches(['\r', '\n']);
        if password.is_empty() {
            bail!("empty password");
        }
        println!("{}", ipgate::auth::hash_password(password));
        return Ok(());
    }

    let config = Config::load(&cli.config)?;
    let backend = build_backend(&config)?;
    if cli.check {
        println!("{}: ok", cli.config.display());
        return Ok(());
    }
    tokio::runtime::Runtime::new()?.block_on(run(config, backend))
}

fn build_backend(config: &Config) -> Result<Arc<dyn CredentialBackend>> {
    Ok(match config.auth.backend {
        BackendKind::Flatfile => {
            let path = config.auth.credentials_file.as_ref().expect("validated");
            Arc::new(FlatFileBackend::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        BackendKind::Ldap => Arc::new(LdapBackend::new(config.auth.ldap.clone().expect("validated"))?),
    })
}

async fn run(config: Config, backend: Arc<dyn CredentialBackend>) -> Result<()> {
    let clock = Arc::new(SystemClock);
    let store = open_store(&config.store_locator()?, config.session.inactivity)?;
    let engine = Arc::new(AclEngine::new(config.acl_policy()?, store.clone()));
    let service = AuthService::new(backend, store, clock.clone(), config.session_settings())
        .with_cache(engine.cache().clone());
    let auth = Arc::new(AuthServer::new(Arc::new(service)).with_portal_dir(config.auth.portal_dir.clone()));

    let access_log: Arc<dyn AccessLog> = match &config.access_log {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("opening access log {}", path.display()))?;
            Arc::new(WriterAccessLog::new(file))
        }
        None => Arc::new(NullAccessLog),
    };
    let mut connector = UpstreamConnector::new(Duration::from_secs(config.upstream_connect_timeout));
    for (authority, addr) in &config.upstream.routes {
        connector = connector.with_route(authority, *addr);
    }
    let proxy = Arc::new(Proxy::new(
        engine,
        clock,
        ProxySettings::new(config.login_url.clone()),
        connector,
        access_log,
    ));

    let proxy_listener = TcpListener::bind(config.listen_addr())
        .await
        .with_context(|| format!("binding proxy on {}", config.listen_addr()))?;
    let auth_listener = TcpListener::bind(config.auth.listen)
        .await
        .with_context(|| format!("binding login service on {}", config.auth.listen))?;
    info!(proxy = %config.listen_addr(), login = %config.auth.listen, "listening");

    tokio::select! {
        r = proxy.serve(proxy_listener) => r.context("proxy listener")?,
        r = auth.serve(auth_listener) => r.context("login listener")?,
        _ = tokio::signal::ctrl_c() => info!("shutting down"),
    }
    Ok(())
}
