//! Added latency of the proxy path against direct requests to the origin.

use std::fmt;
use std::io;
use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use ipgate::{AclPolicy, PolicyMode};
use tokio::net::TcpStream;

use crate::client::HttpClient;
use crate::scenario::{Gateway, GatewayConfig};

const BENCH_URI: &str = "http://bench.example/bench/page";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub clients: usize,
    pub requests: usize,
    /// Cache session answers (TTL 300) and prime the cache before timing.
    /// When false the TTL is zero and every request queries the store.
    pub warm: bool,
    /// Artificial cost of each store lookup.
    pub store_delay: Option<Duration>,
}

impl BenchConfig {
    pub fn new(clients: usize, requests: usize, warm: bool) -> Self {
        BenchConfig {
            clients,
            requests,
            warm,
            store_delay: None,
        }
    }
}

/// Sorted latency samples.
#[derive(Debug, Clone, Default)]
pub struct Distribution(Vec<Duration>);

impl Distribution {
    pub fn from_samples(mut samples: Vec<Duration>) -> Self {
        samples.sort();
        Distribution(samples)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Nearest-rank percentile, `p` in 0..=100.
    pub fn percentile(&self, p: f64) -> Duration {
        if self.0.is_empty() {
            return Duration::ZERO;
        }
        let rank = ((p / 100.0) * self.0.len() as f64).ceil() as usize;
        self.0[rank.clamp(1, self.0.len()) - 1]
    }

    pub fn p50(&self) -> Duration {
        self.percentile(50.0)
    }

    pub fn p95(&self) -> Duration {
        self.percentile(95.0)
    }

    pub fn max(&self) -> Duration {
        self.0.last().copied().unwrap_or_default()
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct LatencySummary {
    pub config: BenchConfig,
    pub proxied: Distribution,
    pub direct: Distribution,
    pub store_lookups: u64,
    pub elapsed: Duration,
}

impl LatencySummary {
    /// Median proxied minus median direct, in milliseconds.
    pub fn overhead_p50_ms(&self) -> f64 {
        ms(self.proxied.p50()) - ms(self.direct.p50())
    }

    pub fn overhead_p95_ms(&self) -> f64 {
        ms(self.proxied.p95()) - ms(self.direct.p95())
    }
}

impl fmt::Display for LatencySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "clients: {}", self.config.clients)?;
        writeln!(f, "requests_per_client: {}", self.config.requests)?;
        writeln!(f, "cache: {}", if self.config.warm { "warm" } else { "cold" })?;
        for (name, d) in [("proxied", &self.proxied), ("direct", &self.direct)] {
            writeln!(
                f,
                "{name}: n={} p50_ms={:.3} p95_ms={:.3} max_ms={:.3}",
                d.len(),
                ms(d.p50()),
                ms(d.p95()),
                ms(d.max())
            )?;
        }
        writeln!(f, "overhead_p50_ms: {:.3}", self.overhead_p50_ms())?;
        writeln!(f, "overhead_p95_ms: {:.3}", self.overhead_p95_ms())?;
        writeln!(f, "store_lookups: {}", self.store_lookups)?;
        writeln!(f, "elapsed_s: {:.3}", self.elapsed.as_secs_f64())
    }
}

/// Every client is logged in; direct and proxied requests alternate on
/// each client's own keep-alive connections so both see the same load.
pub async fn bench_latency(cfg: BenchConfig) -> io::Result<LatencySummary> {
    let started = Instant::now();
    let ttl = if cfg.warm { 300 } else { 0 };
    let policy = AclPolicy::new(PolicyMode::Whitelist, std::iter::empty::<&str>(), "internet")
        .expect("static policy")
        .with_ttl(ttl);
    let gateway = Gateway::start(GatewayConfig {
        store_delay: cfg.store_delay,
        record: false,
        ..GatewayConfig::new(policy).user("bench", "bench-password", &["internet"])
    })
    .await?;
    let origin = gateway.origin().addr();

    let base = u32::from(Ipv4Addr::new(10, 1, 0, 10));
    let mut tasks = Vec::with_capacity(cfg.clients);
    for i in 0..cfg.clients {
        let ip = Ipv4Addr::from(base + i as u32);
        let login = gateway.login(ip, "bench", "bench-password", 3600).await?;
        if login.status != 200 {
            return Err(io::Error::other(format!("bench login failed with {}", login.status)));
        }
        let gw = gateway.clone();
        let (requests, warm) = (cfg.requests, cfg.warm);
        tasks.push(tokio::spawn(async move {
            let mut proxy = gw.proxy_connection(ip);
            let stream = TcpStream::connect(origin).await?;
            stream.set_nodelay(true)?;
            let mut direct = HttpClient::new(stream);
            if warm {
                expect_ok(proxy.get(BENCH_URI).await?)?;
            }
            let mut p = Vec::with_capacity(requests);
            let mut d = Vec::with_capacity(requests);
            for _ in 0..requests {
                let t = Instant::now();
                expect_ok(direct.get(BENCH_URI).await?)?;
                d.push(t.elapsed());
                let t = Instant::now();
                expect_ok(proxy.get(BENCH_URI).await?)?;
                p.push(t.elapsed());
            }
            Ok::<_, io::Error>((p, d))
        }));
    }
    let (mut proxied, mut direct) = (Vec::new(), Vec::new());
    for t in tasks {
        let (p, d) = t.await.map_err(io::Error::other)??;
        proxied.extend(p);
        direct.extend(d);
    }
    Ok(LatencySummary {
        config: cfg,
        proxied: Distribution::from_samples(proxied),
        direct: Distribution::from_samples(direct),
        store_lookups: gateway.store().lookups(),
        elapsed: started.elapsed(),
    })
}

fn expect_ok(resp: crate::client::HttpResponse) -> io::Result<()> {
    if resp.status == 200 {
        Ok(())
    } else {
        Err(io::Error::other(format!("unexpected status {}", resp.status)))
    }
}
