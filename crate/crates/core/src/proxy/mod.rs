//! The intercepting proxy.
//!
//! Connections arrive redirected from port 80, so requests are in origin
//! form and the proxy has to rebuild the absolute URI from `Host`. Each
//! request on a keep-alive connection is judged on its own against the
//! connection's source address.

use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use tokio::io::{AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tracing::{debug, info, warn};
use url::Url;

use crate::acl::{AclEngine, Verdict, VerdictAction};
use crate::clock::{Clock, Timestamp};
use crate::http::{
    html_escape, parse_request_head, read_head, reason_phrase, relay_body, request_framing, simple_response,
    strip_hop_by_hop, BodyFraming, HeadError, Headers, RelayError, RelayMeter, RequestHead, MAX_HEAD_BYTES,
};

mod upstream;
mod uri;

pub use upstream::{forward_request, upstream_headers, UpstreamConnector, UpstreamError, UpstreamResponse};
pub use uri::{parse_authority, reconstruct_uri, resolve_target, TargetUri, UriError};

pub const DEFAULT_LISTEN_PORT: u16 = 3128;
pub const VIA: &str = "1.1 ipgate";
const CLIENT_BUFFER: usize = 16 * 1024;

/// What the ACL engine judges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequestSummary {
    pub client_ip: Ipv4Addr,
    pub method: String,
    /// Target exactly as sent by the client.
    pub request_target: String,
    pub host: String,
    pub port: u16,
    /// Origin-form path and query.
    pub path: String,
    pub absolute_uri: String,
}

impl HttpRequestSummary {
    pub fn new(client_ip: Ipv4Addr, method: &str, request_target: &str, target: TargetUri) -> Self {
        let absolute_uri = target.absolute();
        HttpRequestSummary {
            client_ip,
            method: method.to_string(),
            request_target: request_target.to_string(),
            host: target.host,
            port: target.port,
            path: target.path,
            absolute_uri,
        }
    }

    /// A GET for an absolute `http://` URI.
    pub fn get(client_ip: Ipv4Addr, uri: &str) -> Result<Self, UriError> {
        Ok(Self::new(client_ip, "GET", uri, resolve_target(uri, None)?))
    }

    pub fn authority(&self) -> String {
        if self.port == 80 {
            self.host.clone()
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }
}

const QUERY_VALUE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

/// Link to the login page carrying the blocked URL as `return`.
pub fn login_link(login_url: &Url, return_to: &str) -> String {
    let sep = if login_url.query().is_some() { '&' } else { '?' };
    format!(
        "{}{}return={}",
        login_url.as_str(),
        sep,
        utf8_percent_encode(return_to, QUERY_VALUE)
    )
}

/// HTML body for a denied request.
pub fn render_deny_page(verdict: &Verdict, request: &HttpRequestSummary, login_url: &Url) -> String {
    let host = html_escape(&request.host);
    let uri = html_escape(&request.absolute_uri);
    let (title, detail) = match verdict.action() {
        VerdictAction::DenyBlacklisted => (
            "Site blocked",
            format!(
                "<p>Access to <strong>{host}</strong> is blocked by the network access policy.</p>\n\
                 <p>Requested URL: <code>{uri}</code></p>"
            ),
        ),
        _ => (
            "Login required",
            format!(
                "<p>Access to <strong>{host}</strong> requires you to log in first.</p>\n\
                 <p>Requested URL: <code>{uri}</code></p>\n\
                 <p><a href=\"{}\">Log in to continue</a>. After logging in, reload this page.</p>",
                html_escape(&login_link(login_url, &request.absolute_uri))
            ),
        ),
    };
    format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>{title}</title></head>\n\
         <body>\n<h1>{title}</h1>\n{detail}\n</body>\n</html>\n"
    )
}

fn error_page(status: u16, message: &str) -> String {
    let title = format!("{status} {}", reason_phrase(status));
    format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>{title}</title></head>\n\
         <body>\n<h1>{title}</h1>\n<p>{}</p>\n</body>\n</html>\n",
        html_escape(message)
    )
}

/// One access log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessLogEntry {
    pub timestamp: Timestamp,
    pub client_ip: Ipv4Addr,
    /// `None` when the request never reached the ACL (parse errors).
    pub verdict: Option<VerdictAction>,
    pub user: Option<String>,
    pub method: String,
    pub uri: String,
    pub status: u16,
    /// Bytes written to the client for this response, head included.
    pub bytes: u64,
}

impl std::fmt::Display for AccessLogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.timestamp,
            self.client_ip,
            self.verdict.map(VerdictAction::as_str).unwrap_or("-"),
            self.user.as_deref().unwrap_or("-"),
            if self.method.is_empty() { "-" } else { &self.method },
            if self.uri.is_empty() { "-" } else { &self.uri },
            self.status,
            self.bytes
        )
    }
}

pub trait AccessLog: Send + Sync {
    fn record(&self, entry: &AccessLogEntry);
}

/// Writes each entry as a line to any writer (file, stdout).
pub struct WriterAccessLog<W: Write + Send>(Mutex<W>);

impl<W: Write + Send> WriterAccessLog<W> {
    pub fn new(w: W) -> Self {
        WriterAccessLog(Mutex::new(w))
    }
}

impl<W: Write + Send> AccessLog for WriterAccessLog<W> {
    fn record(&self, entry: &AccessLogEntry) {
        let mut w = self.0.lock();
        if let Err(e) = writeln!(w, "{entry}").and_then(|_| w.flush()) {
            warn!(error = %e, "access log write failed");
        }
    }
}

/// Keeps entries in memory.
#[derive(Debug, Default)]
pub struct MemoryAccessLog(Mutex<Vec<AccessLogEntry>>);

impl MemoryAccessLog {
    pub fn entries(&self) -> Vec<AccessLogEntry> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AccessLog for MemoryAccessLog {
    fn record(&self, entry: &AccessLogEntry) {
        self.0.lock().push(entry.clone());
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullAccessLog;

impl AccessLog for NullAccessLog {
    fn record(&self, _: &AccessLogEntry) {}
}

#[derive(Debug, Clone)]
pub struct ProxySettings {
    pub login_url: Url,
    pub max_head_bytes: usize,
}

impl ProxySettings {
    pub fn new(login_url: Url) -> Self {
        ProxySettings {
            login_url,
            max_head_bytes: MAX_HEAD_BYTES,
        }
    }

    fn login_authority(&self) -> Option<(String, u16)> {
        let host = self.login_url.host_str()?.to_ascii_lowercase();
        Some((host, self.login_url.port_or_known_default()?))
    }
}

enum Next {
    KeepAlive,
    Close,
}

pub struct Proxy {
    engine: Arc<AclEngine>,
    clock: Arc<dyn Clock>,
    settings: ProxySettings,
    connector: UpstreamConnector,
    access_log: Arc<dyn AccessLog>,
    meter: Arc<RelayMeter>,
}

impl Proxy {
    pub fn new(
        engine: Arc<AclEngine>,
        clock: Arc<dyn Clock>,
        settings: ProxySettings,
        connector: UpstreamConnector,
        access_log: Arc<dyn AccessLog>,
    ) -> Self {
        Proxy {
            engine,
            clock,
            settings,
            connector,
            access_log,
            meter: Arc::new(RelayMeter::default()),
        }
    }

    pub fn engine(&self) -> &Arc<AclEngine> {
        &self.engine
    }

    pub fn meter(&self) -> &Arc<RelayMeter> {
        &self.meter
    }

    pub fn connect_timeout(&self) -> Duration {
        self.connector.timeout()
    }

    /// Accept loop. Each connection is judged by its TCP source address.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> io::Result<()> {
        loop {
            let (stream, peer) = listener.accept().await?;
            let ip = match peer.ip() {
                IpAddr::V4(ip) => ip,
                IpAddr::V6(v6) => match v6.to_ipv4_mapped() {
                    Some(ip) => ip,
                    None => {
                        warn!(%peer, "dropping IPv6 client");
                        continue;
                    }
                },
            };
            let _ = stream.set_nodelay(true);
            let this = self.clone();
            tokio::spawn(async move { this.handle_connection(stream, ip).await });
        }
    }

    /// Serve every request on one client connection. `client_ip` must be
    /// the connection's original source address.
    pub async fn handle_connection<S>(&self, stream: S, client_ip: Ipv4Addr)
    where
        S: AsyncRead + AsyncWrite + Send + Unpin,
    {
        let (rd, mut wr) = tokio::io::split(stream);
        let mut rd = BufReader::with_capacity(CLIENT_BUFFER, rd);
        while let Next::KeepAlive = self.handle_request(&mut rd, &mut wr, client_ip).await {}
        let _ = wr.shutdown().await;
    }

    fn log(&self, entry: AccessLogEntry) {
        debug!(%entry, "request");
        self.access_log.record(&entry);
    }

    async fn respond_error<W: AsyncWrite + Unpin>(
        &self,
        wr: &mut W,
        client_ip: Ipv4Addr,
        status: u16,
        message: &str,
        request: Option<(&str, &str)>,
        verdict: Option<&Verdict>,
        close: bool,
    ) -> Next {
        let mut extra = Headers::new();
        extra.push("Via", VIA);
        let resp = simple_response(status, "text/html; charset=utf-8", error_page(status, message).as_bytes(), close, &extra);
        let ok = wr.write_all(&resp).await.and(wr.flush().await).is_ok();
        let (method, uri) = request.unwrap_or(("", ""));
        self.log(AccessLogEntry {
            timestamp: self.clock.now(),
            client_ip,
            verdict: verdict.map(Verdict::action),
            user: verdict.and_then(|v| v.user().map(str::to_string)),
            method: method.to_string(),
            uri: uri.to_string(),
            status,
            bytes: resp.len() as u64,
        });
        if close || !ok {
            Next::Close
        } else {
            Next::KeepAlive
        }
    }

    fn is_login_service(&self, req: &HttpRequestSummary) -> bool {
        self.settings
            .login_authority()
            .is_some_and(|(host, port)| host == req.host && port == req.port)
    }

    async fn handle_request<R, W>(&self, rd: &mut BufReader<R>, wr: &mut W, client_ip: Ipv4Addr) -> Next
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let raw = match read_head(rd, self.settings.max_head_bytes).await {
            Ok(Some(raw)) => raw,
            Ok(None) | Err(HeadError::UnexpectedEof) => return Next::Close,
            Err(HeadError::Io(e)) => {
                debug!(%client_ip, error = %e, "client read failed");
                return Next::Close;
            }
            Err(HeadError::TooLarge(limit)) => {
                let msg = format!("Request head exceeds {limit} bytes.");
                return self.respond_error(wr, client_ip, 431, &msg, None, None, true).await;
            }
            Err(HeadError::Malformed(m)) => {
                return self.respond_error(wr, client_ip, 400, &m, None, None, true).await;
            }
        };
        let head = match parse_request_head(&raw) {
            Ok(h) => h,
            Err(e) => return self.respond_error(wr, client_ip, 400, &e.to_string(), None, None, true).await,
        };
        if head.method.eq_ignore_ascii_case("CONNECT") {
            let req = Some((head.method.as_str(), head.target.as_str()));
            return self
                .respond_error(wr, client_ip, 403, "CONNECT tunnels are not supported.", req, None, true)
                .await;
        }
        let target = match resolve_target(&head.target, head.headers.get("host")) {
            Ok(t) => t,
            Err(e) => {
                let req = Some((head.method.as_str(), head.target.as_str()));
                return self.respond_error(wr, client_ip, 400, &e.to_string(), req, None, true).await;
            }
        };
        let summary = HttpRequestSummary::new(client_ip, &head.method, &head.target, target);
        let framing = match request_framing(&head.headers) {
            Ok(f) => f,
            Err(e) => {
                let req = Some((summary.method.as_str(), summary.absolute_uri.as_str()));
                return self.respond_error(wr, client_ip, 400, &e.to_string(), req, None, true).await;
            }
        };

        let now = self.clock.now();
        let verdict = if self.is_login_service(&summary) {
            Verdict::allow()
        } else {
            self.engine.evaluate(&summary, now)
        };

        if !verdict.is_allow() {
            // Unread request bodies make the connection unusable.
            let close = head.wants_close() || framing != BodyFraming::Empty;
            let page = render_deny_page(&verdict, &summary, &self.settings.login_url);
            let mut extra = Headers::new();
            extra.push("Via", VIA);
            let resp = simple_response(403, "text/html; charset=utf-8", page.as_bytes(), close, &extra);
            let ok = wr.write_all(&resp).await.and(wr.flush().await).is_ok();
            self.log(AccessLogEntry {
                timestamp: now,
                client_ip,
                verdict: Some(verdict.action()),
                user: None,
                method: summary.method.clone(),
                uri: summary.absolute_uri.clone(),
                status: 403,
                bytes: resp.len() as u64,
            });
            return if close || !ok { Next::Close } else { Next::KeepAlive };
        }

        self.relay(rd, wr, &summary, &head, framing, &verdict).await
    }

    async fn relay<R, W>(
        &self,
        rd: &mut BufReader<R>,
        wr: &mut W,
        summary: &HttpRequestSummary,
        head: &RequestHead,
        framing: BodyFraming,
        verdict: &Verdict,
    ) -> Next
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let client_ip = summary.client_ip;
        let req = Some((summary.method.as_str(), summary.absolute_uri.as_str()));
        let expects_continue = head.headers.tokens("expect").iter().any(|t| t == "100-continue");
        if expects_continue && framing != BodyFraming::Empty && wr.write_all(b"HTTP/1.1 100 Continue\r\n\r\n").await.is_err() {
            return Next::Close;
        }

        let mut upstream = match forward_request(&self.connector, summary, head, framing, rd, &self.meter).await {
            Ok(u) => u,
            Err(UpstreamError::ClientBody(e)) => {
                info!(%client_ip, uri = %summary.absolute_uri, error = %e, "client request body failed");
                return Next::Close;
            }
            Err(e) => {
                warn!(%client_ip, uri = %summary.absolute_uri, reason = e.reason(), error = %e, "upstream failure");
                // The request body may be partly unread.
                let close = head.wants_close() || framing != BodyFraming::Empty;
                let msg = format!("The upstream server could not be reached ({}).", e.reason());
                return self.respond_error(wr, client_ip, 502, &msg, req, Some(verdict), close).await;
            }
        };

        let close = head.wants_close() || upstream.framing == BodyFraming::UntilClose;
        let mut out = Vec::new();
        for raw in &upstream.interim {
            out.extend_from_slice(raw);
        }
        let status = upstream.head.status;
        let reason = if upstream.head.reason.is_empty() {
            reason_phrase(status).to_string()
        } else {
            upstream.head.reason.clone()
        };
        out.extend_from_slice(format!("HTTP/1.1 {status} {reason}\r\n").as_bytes());
        let mut headers = upstream.head.headers.clone();
        strip_hop_by_hop(&mut headers);
        headers.push("Via", VIA);
        if close {
            headers.push("Connection", "close");
        }
        headers.write_to(&mut out);
        out.extend_from_slice(b"\r\n");
        let head_len = out.len() as u64;
        if wr.write_all(&out).await.is_err() {
            return Next::Close;
        }

        let mut next = if close { Next::Close } else { Next::KeepAlive };
        let body_bytes = match relay_body(upstream.framing, &mut upstream.body, wr, &self.meter).await {
            Ok(n) => n,
            Err(RelayError::Sink(e)) => {
                debug!(%client_ip, error = %e, "client went away mid-response");
                next = Next::Close;
                0
            }
            Err(e) => {
                warn!(%client_ip, uri = %summary.absolute_uri, error = %e, "upstream closed mid-body; dropping client connection");
                next = Next::Close;
                0
            }
        };
        self.log(AccessLogEntry {
            timestamp: self.clock.now(),
            client_ip,
            verdict: Some(verdict.action()),
            user: verdict.user().map(str::to_string),
            method: summary.method.clone(),
            uri: summary.absolute_uri.clone(),
            status,
            bytes: head_len + body_bytes,
        });
        next
    }
}
