use std::fmt;
use std::io;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use ipgate::auth::{hash_password, AuthServer, AuthService, CredentialRecord, FlatFileBackend, SessionSettings};
use ipgate::proxy::{AccessLog, HttpRequestSummary, MemoryAccessLog, NullAccessLog, Proxy, ProxySettings, UpstreamConnector};
use ipgate::{AclEngine, AclPolicy, ManualClock, MemoryStore, SessionStore, Timestamp, VerdictAction};
use tokio::io::DuplexStream;
use url::Url;

use crate::client::{form_post, HttpClient, HttpResponse};
use crate::instrument::InstrumentedStore;
use crate::origin::StubOrigin;
use crate::script::{Action, ClientAction, Scenario, Step, UserSpec};
use crate::topology::Topology;

pub const LOGIN_PORT: u16 = 8080;
const DUPLEX_BUFFER: usize = 64 * 1024;

pub struct GatewayConfig {
    pub policy: AclPolicy,
    pub users: Vec<UserSpec>,
    /// Credentials file to load instead of `users`.
    pub credentials_file: Option<PathBuf>,
    pub max_duration: u64,
    pub start_time: Timestamp,
    pub gateway_ip: Ipv4Addr,
    /// Wrapped in an [`InstrumentedStore`]; a fresh memory store if unset.
    pub store: Option<Arc<dyn SessionStore>>,
    pub store_delay: Option<Duration>,
    /// Keep per-request records in the access log and stub origin.
    pub record: bool,
}

impl GatewayConfig {
    pub fn new(policy: AclPolicy) -> Self {
        GatewayConfig {
            policy,
            users: Vec::new(),
            credentials_file: None,
            max_duration: ipgate::auth::DEFAULT_MAX_DURATION,
            start_time: 1_000_000,
            gateway_ip: Ipv4Addr::new(10, 0, 0, 1),
            store: None,
            store_delay: None,
            record: true,
        }
    }

    pub fn user(mut self, name: &str, password: &str, groups: &[&str]) -> Self {
        self.users.push(UserSpec {
            name: name.into(),
            password: password.into(),
            groups: groups.iter().map(|g| g.to_string()).collect(),
        });
        self
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        GatewayConfig {
            policy: s.policy.clone(),
            users: s.users.clone(),
            max_duration: s.max_duration,
            start_time: s.start_time,
            gateway_ip: s.topology.gateway_ip,
            ..GatewayConfig::new(s.policy.clone())
        }
    }
}

/// Proxy, login service, session store and stub origin wired together
/// in-process, with connections delivered through an address-annotating
/// shim instead of real sockets on the client side.
#[derive(Clone)]
pub struct Gateway {
    clock: ManualClock,
    store: Arc<InstrumentedStore>,
    engine: Arc<AclEngine>,
    proxy: Arc<Proxy>,
    auth: Arc<AuthServer>,
    origin: Arc<StubOrigin>,
    access_log: Arc<MemoryAccessLog>,
    login_url: Url,
}

impl Gateway {
    pub async fn start(cfg: GatewayConfig) -> io::Result<Self> {
        let origin = Arc::new(if cfg.record {
            StubOrigin::start().await?
        } else {
            StubOrigin::start_unrecorded().await?
        });
        let clock = ManualClock::new(cfg.start_time);
        let inner = cfg.store.unwrap_or_else(|| Arc::new(MemoryStore::new()));
        let mut store = InstrumentedStore::new(inner);
        if let Some(d) = cfg.store_delay {
            store = store.with_delay(d);
        }
        let store = Arc::new(store);
        let engine = Arc::new(AclEngine::new(cfg.policy, store.clone()));

        let backend = match &cfg.credentials_file {
            Some(path) => FlatFileBackend::load(path).map_err(io::Error::other)?,
            None => FlatFileBackend::new(
                cfg.users
                    .iter()
                    .map(|u| CredentialRecord {
                        user: u.name.clone(),
                        password_hash: hash_password(&u.password),
                        groups: u.groups.clone(),
                    })
                    .collect(),
            ),
        };
        let settings = SessionSettings {
            max_duration: cfg.max_duration,
            ..SessionSettings::default()
        };
        let service = AuthService::new(
            Arc::new(backend),
            store.clone(),
            Arc::new(clock.clone()),
            settings,
        )
        .with_cache(engine.cache().clone());
        let auth = Arc::new(AuthServer::new(Arc::new(service)));

        let login_url: Url = format!("http://{}:{LOGIN_PORT}/login", cfg.gateway_ip)
            .parse()
            .expect("login url is well formed");
        let access_log = Arc::new(MemoryAccessLog::default());
        let log: Arc<dyn AccessLog> = if cfg.record {
            access_log.clone()
        } else {
            Arc::new(NullAccessLog)
        };
        let connector = UpstreamConnector::new(Duration::from_secs(5)).with_default_route(origin.addr());
        let proxy = Arc::new(Proxy::new(
            engine.clone(),
            Arc::new(clock.clone()),
            ProxySettings::new(login_url.clone()),
            connector,
            log,
        ));
        Ok(Gateway {
            clock,
            store,
            engine,
            proxy,
            auth,
            origin,
            access_log,
            login_url,
        })
    }

    pub fn clock(&self) -> &ManualClock {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        ipgate::Clock::now(&self.clock)
    }

    pub fn advance(&self, secs: u64) {
        self.clock.advance(secs);
    }

    pub fn store(&self) -> &Arc<InstrumentedStore> {
        &self.store
    }

    pub fn engine(&self) -> &Arc<AclEngine> {
        &self.engine
    }

    pub fn proxy(&self) -> &Arc<Proxy> {
        &self.proxy
    }

    pub fn origin(&self) -> &StubOrigin {
        &self.origin
    }

    pub fn access_log(&self) -> &MemoryAccessLog {
        &self.access_log
    }

    pub fn login_url(&self) -> &Url {
        &self.login_url
    }

    /// A client connection to the proxy whose source address appears as
    /// `source_ip`.
    pub fn proxy_connection(&self, source_ip: Ipv4Addr) -> HttpClient<DuplexStream> {
        let (client, server) = tokio::io::duplex(DUPLEX_BUFFER);
        let proxy = self.proxy.clone();
        tokio::spawn(async move { proxy.handle_connection(server, source_ip).await });
        HttpClient::new(client)
    }

    pub fn login_connection(&self, source_ip: Ipv4Addr) -> HttpClient<DuplexStream> {
        let (client, server) = tokio::io::duplex(DUPLEX_BUFFER);
        let auth = self.auth.clone();
        tokio::spawn(async move { auth.handle_connection(server, source_ip).await });
        HttpClient::new(client)
    }

    pub async fn request(&self, source_ip: Ipv4Addr, uri: &str) -> io::Result<HttpResponse> {
        self.proxy_connection(source_ip).get(uri).await
    }

    fn login_host(&self) -> String {
        format!("{}:{LOGIN_PORT}", self.login_url.host_str().unwrap_or_default())
    }

    pub async fn login(&self, source_ip: Ipv4Addr, user: &str, password: &str, duration: u64) -> io::Result<HttpResponse> {
        let duration = duration.to_string();
        let raw = form_post(
            "/login",
            &self.login_host(),
            &[("user", user), ("password", password), ("duration", &duration)],
            false,
        );
        self.login_connection(source_ip).send(&raw).await
    }

    pub async fn logout(&self, source_ip: Ipv4Addr) -> io::Result<HttpResponse> {
        let raw = form_post("/logout", &self.login_host(), &[], false);
        self.login_connection(source_ip).send(&raw).await
    }

    pub async fn status(&self, source_ip: Ipv4Addr) -> io::Result<HttpResponse> {
        let raw = format!("GET /status HTTP/1.1\r\nHost: {}\r\n\r\n", self.login_host());
        self.login_connection(source_ip).send(raw.as_bytes()).await
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub time: Timestamp,
    pub client_ip: Ipv4Addr,
    /// Source address the gateway saw.
    pub seen_as: Ipv4Addr,
    pub action: &'static str,
    pub target: String,
    pub status: u16,
    pub verdict: Option<VerdictAction>,
}

impl fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} client={} seen_as={} {} {} status={} verdict={}",
            self.time,
            self.client_ip,
            self.seen_as,
            self.action,
            self.target,
            self.status,
            self.verdict.map(|v| v.as_str()).unwrap_or("-")
        )
    }
}

/// Append-only record of a scenario run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioTranscript {
    entries: Vec<TranscriptEntry>,
}

impl ScenarioTranscript {
    fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    /// Verdicts of proxied requests, in script order.
    pub fn verdicts(&self) -> Vec<VerdictAction> {
        self.entries.iter().filter_map(|e| e.verdict).collect()
    }

    pub fn requests_from(&self, client: Ipv4Addr) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries
            .iter()
            .filter(move |e| e.client_ip == client && e.action == "request")
    }
}

impl fmt::Display for ScenarioTranscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Build a gateway for `scenario` and run it.
pub async fn run_scenario(scenario: &Scenario) -> io::Result<ScenarioTranscript> {
    let gateway = Gateway::start(GatewayConfig::for_scenario(scenario)).await?;
    run_on(&gateway, scenario).await
}

/// Run `scenario` against an existing gateway.
pub async fn run_on(gateway: &Gateway, scenario: &Scenario) -> io::Result<ScenarioTranscript> {
    let mut transcript = ScenarioTranscript::default();
    for step in &scenario.steps {
        match step {
            Step::Advance(secs) => gateway.advance(*secs),
            Step::Do(action) => {
                let log_mark = gateway.access_log().len();
                let result = perform(gateway, &scenario.topology, action).await?;
                record(gateway, &scenario.topology, &mut transcript, log_mark, vec![(action, result)]);
            }
            Step::Parallel(actions) => {
                let log_mark = gateway.access_log().len();
                let handles: Vec<_> = actions
                    .iter()
                    .map(|a| {
                        let (gw, sc, a) = (gateway.clone(), scenario.topology.clone(), a.clone());
                        tokio::spawn(async move { perform(&gw, &sc, &a).await })
                    })
                    .collect();
                let mut results = Vec::with_capacity(handles.len());
                for (a, h) in actions.iter().zip(handles) {
                    let r = h.await.map_err(io::Error::other)??;
                    results.push((a, r));
                }
                record(gateway, &scenario.topology, &mut transcript, log_mark, results);
            }
        }
    }
    Ok(transcript)
}

async fn perform(gateway: &Gateway, topology: &Topology, action: &ClientAction) -> io::Result<HttpResponse> {
    let source = topology.source_ip(action.client);
    match &action.action {
        Action::Request { uri } => gateway.request(source, uri).await,
        Action::Login {
            user,
            password,
            duration,
        } => gateway.login(source, user, password, *duration).await,
        Action::Logout => gateway.logout(source).await,
        Action::Status => gateway.status(source).await,
    }
}

fn record(
    gateway: &Gateway,
    topology: &Topology,
    transcript: &mut ScenarioTranscript,
    log_mark: usize,
    results: Vec<(&ClientAction, HttpResponse)>,
) {
    let mut fresh: Vec<_> = gateway.access_log().entries().into_iter().skip(log_mark).map(Some).collect();
    let time = gateway.now();
    for (action, resp) in results {
        let seen_as = topology.source_ip(action.client);
        let (name, target, verdict) = match &action.action {
            Action::Request { uri } => {
                let absolute = HttpRequestSummary::get(seen_as, uri)
                    .map(|s| s.absolute_uri)
                    .unwrap_or_else(|_| uri.clone());
                let verdict = fresh
                    .iter_mut()
                    .find(|e| matches!(e, Some(e) if e.client_ip == seen_as && e.uri == absolute))
                    .and_then(Option::take)
                    .and_then(|e| e.verdict);
                ("request", absolute, verdict)
            }
            Action::Login { user, duration, .. } => ("login", format!("{user} {duration}"), None),
            Action::Logout => ("logout", String::new(), None),
            Action::Status => ("status", String::new(), None),
        };
        transcript.push(TranscriptEntry {
            time,
            client_ip: action.client,
            seen_as,
            action: name,
            target,
            status: resp.status,
            verdict,
        });
    }
}
