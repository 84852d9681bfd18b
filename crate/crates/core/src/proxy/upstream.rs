use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncBufRead, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedReadHalf;
use tokio::net::TcpStream;
use tokio::time::timeout;

use super::{HttpRequestSummary, VIA};
use crate::http::{
    parse_response_head, read_head, relay_body, response_framing, strip_hop_by_hop, BodyFraming, HeadError,
    Headers, RelayError, RelayMeter, RequestHead, ResponseHead, MAX_HEAD_BYTES,
};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const UPSTREAM_BUFFER: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum UpstreamError {
    #[error("cannot resolve {0}")]
    Dns(String),
    #[error("connect to {0} timed out")]
    ConnectTimeout(String),
    #[error("connect to {addr} failed: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("no response head within the timeout")]
    ResponseTimeout,
    #[error("upstream protocol error: {0}")]
    Protocol(String),
    #[error("upstream i/o: {0}")]
    Io(#[from] io::Error),
    #[error("client request body: {0}")]
    ClientBody(RelayError),
}

impl UpstreamError {
    /// Short tag for the log.
    pub fn reason(&self) -> &'static str {
        match self {
            UpstreamError::Dns(_) => "dns-failure",
            UpstreamError::ConnectTimeout(_) => "connect-timeout",
            UpstreamError::Connect { .. } => "connect-failed",
            UpstreamError::ResponseTimeout => "response-timeout",
            UpstreamError::Protocol(_) => "protocol-error",
            UpstreamError::Io(_) => "upstream-io",
            UpstreamError::ClientBody(_) => "client-body",
        }
    }
}

/// Opens origin connections. Static routes override DNS, which is how the
/// test harness points every host at an in-process origin.
#[derive(Debug, Clone)]
pub struct UpstreamConnector {
    routes: HashMap<String, SocketAddr>,
    default_route: Option<SocketAddr>,
    timeout: Duration,
}

impl Default for UpstreamConnector {
    fn default() -> Self {
        Self::new(DEFAULT_CONNECT_TIMEOUT)
    }
}

impl UpstreamConnector {
    pub fn new(timeout: Duration) -> Self {
        UpstreamConnector {
            routes: HashMap::new(),
            default_route: None,
            timeout,
        }
    }

    /// Send requests for `authority` (`host` or `host:port`) to `addr`.
    pub fn with_route(mut self, authority: &str, addr: SocketAddr) -> Self {
        self.routes.insert(authority.to_ascii_lowercase(), addr);
        self
    }

    /// Send every request without a specific route to `addr`.
    pub fn with_default_route(mut self, addr: SocketAddr) -> Self {
        self.default_route = Some(addr);
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    async fn resolve(&self, host: &str, port: u16) -> Result<SocketAddr, UpstreamError> {
        let key = format!("{host}:{port}");
        if let Some(addr) = self.routes.get(&key).or_else(|| self.routes.get(host)).or(self.default_route.as_ref()) {
            return Ok(*addr);
        }
        let name = host.trim_start_matches('[').trim_end_matches(']');
        let lookup = timeout(self.timeout, tokio::net::lookup_host((name, port)))
            .await
            .map_err(|_| UpstreamError::Dns(format!("{key} (timed out)")))?;
        lookup
            .map_err(|e| UpstreamError::Dns(format!("{key}: {e}")))?
            .next()
            .ok_or(UpstreamError::Dns(key))
    }

    pub async fn connect(&self, host: &str, port: u16) -> Result<TcpStream, UpstreamError> {
        let addr = self.resolve(host, port).await?;
        let stream = timeout(self.timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| UpstreamError::ConnectTimeout(addr.to_string()))?
            .map_err(|source| UpstreamError::Connect {
                addr: addr.to_string(),
                source,
            })?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }
}

/// An origin response whose head has been read; the body is still on the
/// wire and must be streamed by the caller.
pub struct UpstreamResponse {
    pub head: ResponseHead,
    pub framing: BodyFraming,
    pub body: BufReader<OwnedReadHalf>,
    /// Interim (1xx) heads received before the final one, raw.
    pub interim: Vec<Vec<u8>>,
}

/// Headers sent upstream: original order, hop-by-hop removed, `Host` set
/// to the target authority, plus `Via` and `Connection: close`.
pub fn upstream_headers(summary: &HttpRequestSummary, original: &Headers) -> Headers {
    let mut headers = original.clone();
    strip_hop_by_hop(&mut headers);
    headers.remove("expect");
    let mut out = Headers::new();
    out.push("Host", summary.authority());
    for (n, v) in headers.iter() {
        if !n.eq_ignore_ascii_case("host") {
            out.push(n, v);
        }
    }
    out.push("Via", VIA);
    out.push("Connection", "close");
    out
}

/// Send the request (streaming its body from `body`) and read the final
/// response head.
pub async fn forward_request<R>(
    connector: &UpstreamConnector,
    summary: &HttpRequestSummary,
    head: &RequestHead,
    request_framing: BodyFraming,
    body: &mut R,
    meter: &RelayMeter,
) -> Result<UpstreamResponse, UpstreamError>
where
    R: AsyncBufRead + Unpin,
{
    let stream = connector.connect(&summary.host, summary.port).await?;
    let (rd, mut wr) = stream.into_split();

    let mut out = format!("{} {} HTTP/1.1\r\n", head.method, summary.path).into_bytes();
    upstream_headers(summary, &head.headers).write_to(&mut out);
    out.extend_from_slice(b"\r\n");
    wr.write_all(&out).await?;
    relay_body(request_framing, body, &mut wr, meter).await.map_err(|e| match e {
        RelayError::Sink(io) => UpstreamError::Io(io),
        other => UpstreamError::ClientBody(other),
    })?;

    let mut rd = BufReader::with_capacity(UPSTREAM_BUFFER, rd);
    let mut interim = Vec::new();
    loop {
        let raw = match timeout(connector.timeout(), read_head(&mut rd, MAX_HEAD_BYTES)).await {
            Err(_) => return Err(UpstreamError::ResponseTimeout),
            Ok(Ok(Some(raw))) => raw,
            Ok(Ok(None)) => return Err(UpstreamError::Protocol("closed without a response".into())),
            Ok(Err(HeadError::Io(e))) => return Err(UpstreamError::Io(e)),
            Ok(Err(e)) => return Err(UpstreamError::Protocol(e.to_string())),
        };
        let parsed = parse_response_head(&raw).map_err(|e| UpstreamError::Protocol(e.to_string()))?;
        match parsed.status {
            101 => return Err(UpstreamError::Protocol("unexpected protocol switch".into())),
            100 => continue,
            102..=199 => interim.push(raw),
            _ => {
                let framing = response_framing(&head.method, &parsed)
                    .map_err(|e| UpstreamError::Protocol(e.to_string()))?;
                return Ok(UpstreamResponse {
                    head: parsed,
                    framing,
                    body: rd,
                    interim,
                });
            }
        }
    }
}
