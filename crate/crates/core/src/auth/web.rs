use std::io;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tracing::{debug, warn};

use super::{AuthService, LoginError, LoginRequest, SessionStatus};
use crate::http::{
    html_escape, parse_request_head, read_head, request_framing, simple_response, BodyFraming, HeadError, Headers,
    RequestHead, MAX_HEAD_BYTES,
};

const MAX_FORM_BYTES: u64 = 16 * 1024;

/// "1 hour", "4 hours", "90 minutes", "45 seconds".
pub fn format_duration(secs: u64) -> String {
    let plural = |n: u64, unit: &str| format!("{n} {unit}{}", if n == 1 { "" } else { "s" });
    if secs % 86_400 == 0 && secs >= 86_400 {
        plural(secs / 86_400, "day")
    } else if secs % 3_600 == 0 && secs >= 3_600 {
        plural(secs / 3_600, "hour")
    } else if secs % 60 == 0 && secs >= 60 {
        plural(secs / 60, "minute")
    } else {
        plural(secs, "second")
    }
}

/// Only plain web URLs are echoed back as a return link.
fn safe_return(url: Option<&str>) -> Option<String> {
    let u = url?.trim();
    let lower = u.to_ascii_lowercase();
    ((lower.starts_with("http://") || lower.starts_with("https://")) && !u.chars().any(char::is_control))
        .then(|| u.to_string())
}

struct Reply {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
    extra: Headers,
}

impl Reply {
    fn html(status: u16, body: String) -> Self {
        Reply {
            status,
            content_type: "text/html; charset=utf-8",
            body: body.into_bytes(),
            extra: Headers::new(),
        }
    }

    fn json(status: u16, value: serde_json::Value) -> Self {
        Reply {
            status,
            content_type: "application/json",
            body: value.to_string().into_bytes(),
            extra: Headers::new(),
        }
    }

    fn text(status: u16, body: String) -> Self {
        Reply {
            status,
            content_type: "text/plain; charset=utf-8",
            body: body.into_bytes(),
            extra: Headers::new(),
        }
    }
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>{t}</title></head>\n\
         <body>\n<h1>{t}</h1>\n{body}\n</body>\n</html>\n",
        t = html_escape(title)
    )
}

/// HTTP front end for [`AuthService`]: `GET/POST /login`, `POST /logout`,
/// `GET /status`, and static files under `/portal/`.
pub struct AuthServer {
    service: Arc<AuthService>,
    portal_dir: Option<PathBuf>,
}

impl AuthServer {
    pub fn new(service: Arc<AuthService>) -> Self {
        AuthServer {
            service,
            portal_dir: None,
        }
    }

    pub fn with_portal_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.portal_dir = dir;
        self
    }

    pub fn service(&self) -> &Arc<AuthService> {
        &self.service
    }

    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> io::Result<()> {
        loop {
            let (stream, peer) = listener.accept().await?;
            let ip = match peer.ip() {
                IpAddr::V4(ip) => ip,
                IpAddr::V6(v6) => match v6.to_ipv4_mapped() {
                    Some(ip) => ip,
                    None => continue,
                },
            };
            let this = self.clone();
            tokio::spawn(async move { this.handle_connection(stream, ip).await });
        }
    }

    /// Serve requests from one connection; `client_ip` is its source
    /// address and is the only identity a login is recorded under.
    pub async fn handle_connection<S>(&self, stream: S, client_ip: Ipv4Addr)
    where
        S: AsyncRead + AsyncWrite + Send + Unpin,
    {
        let (rd, mut wr) = tokio::io::split(stream);
        let mut rd = BufReader::new(rd);
        loop {
            let raw = match read_head(&mut rd, MAX_HEAD_BYTES).await {
                Ok(Some(raw)) => raw,
                Ok(None) | Err(HeadError::UnexpectedEof) | Err(HeadError::Io(_)) => break,
                Err(HeadError::TooLarge(_)) => {
                    let _ = write_reply(&mut wr, Reply::text(431, "request head too large\n".into()), true).await;
                    break;
                }
                Err(HeadError::Malformed(m)) => {
                    let _ = write_reply(&mut wr, Reply::text(400, format!("{m}\n")), true).await;
                    break;
                }
            };
            let head = match parse_request_head(&raw) {
                Ok(h) => h,
                Err(e) => {
                    let _ = write_reply(&mut wr, Reply::text(400, format!("{e}\n")), true).await;
                    break;
                }
            };
            let body = match read_form_body(&mut rd, &head).await {
                Ok(b) => b,
                Err(status) => {
                    let _ = write_reply(&mut wr, Reply::text(status, "unsupported request body\n".into()), true).await;
                    break;
                }
            };
            let reply = self.route(&head, &body, client_ip).await;
            let close = head.wants_close();
            if write_reply(&mut wr, reply, close).await.is_err() || close {
                break;
            }
        }
        let _ = wr.shutdown().await;
    }

    async fn route(&self, head: &RequestHead, body: &[u8], client_ip: Ipv4Addr) -> Reply {
        let (path, query) = head.target.split_once('?').unwrap_or((head.target.as_str(), ""));
        let wants_json = head
            .headers
            .get_all("accept")
            .any(|a| a.to_ascii_lowercase().contains("application/json"));
        debug!(%client_ip, method = %head.method, path, "login service request");
        match (head.method.as_str(), path) {
            ("GET" | "HEAD", "/") => {
                let mut r = Reply::text(303, "see /login\n".into());
                r.extra.push("Location", "/login");
                r
            }
            ("GET" | "HEAD", "/login") => {
                let ret = form_value(query.as_bytes(), "return");
                self.login_form(wants_json, safe_return(ret.as_deref()).as_deref(), None)
            }
            ("POST", "/login") => self.login(body, client_ip, wants_json).await,
            ("POST", "/logout") => match self.service.handle_logout(client_ip) {
                Ok(st) => self.status_reply(&st, wants_json, true),
                Err(e) => self.error_reply(&e, wants_json),
            },
            ("GET" | "HEAD", "/status") => {
                let now = self.service.clock().now();
                match self.service.handle_status(client_ip, now) {
                    Ok(st) => self.status_reply(&st, wants_json, false),
                    Err(e) => self.error_reply(&e, wants_json),
                }
            }
            ("GET" | "HEAD", p) if p.starts_with("/portal/") => self.portal_file(&p["/portal/".len()..]).await,
            (_, "/login" | "/logout" | "/status") => Reply::text(405, "method not allowed\n".into()),
            _ => Reply::text(404, "not found\n".into()),
        }
    }

    fn login_form(&self, json: bool, return_url: Option<&str>, error: Option<&LoginError>) -> Reply {
        let settings = self.service.settings();
        if json {
            return Reply::json(
                200,
                json!({ "durations": settings.durations, "max_duration": settings.max_duration }),
            );
        }
        let options: String = settings
            .durations
            .iter()
            .map(|d| format!("<option value=\"{d}\">{}</option>", format_duration(*d)))
            .collect::<Vec<_>>()
            .join("\n");
        let error_html = error
            .map(|e| format!("<p class=\"error\">{}</p>\n", html_escape(&e.to_string())))
            .unwrap_or_default();
        let return_field = return_url
            .map(|r| format!("<input type=\"hidden\" name=\"return\" value=\"{}\">\n", html_escape(r)))
            .unwrap_or_default();
        let body = format!(
            "{error_html}<form method=\"post\" action=\"/login\">\n\
             <label>User <input type=\"text\" name=\"user\" autocomplete=\"username\" required></label><br>\n\
             <label>Password <input type=\"password\" name=\"password\" autocomplete=\"current-password\" required></label><br>\n\
             <label>Access for <select name=\"duration\">\n{options}\n</select></label><br>\n\
             {return_field}<button type=\"submit\">Log in</button>\n</form>"
        );
        let status = error.map(LoginError::status_code).unwrap_or(200);
        Reply::html(status, page("Internet access login", &body))
    }

    async fn login(&self, body: &[u8], client_ip: Ipv4Addr, json: bool) -> Reply {
        let user = form_value(body, "user").unwrap_or_default();
        let password = form_value(body, "password").unwrap_or_default();
        let return_url = safe_return(form_value(body, "return").as_deref());
        let duration = match form_value(body, "duration") {
            None => self.service.settings().durations.first().copied().unwrap_or(3_600),
            Some(d) => match d.trim().parse::<u64>() {
                Ok(d) => d,
                Err(_) => return self.error_reply(&LoginError::InvalidDuration, json),
            },
        };
        let req = LoginRequest {
            user,
            password,
            duration,
            client_ip,
        };
        let now = self.service.clock().now();
        match self.service.handle_login(&req, now).await {
            Ok(st) if json => {
                let mut v = status_json(&st, now);
                if let Some(r) = &return_url {
                    v["return"] = json!(r);
                }
                Reply::json(200, v)
            }
            Ok(st) => {
                let remaining = st.remaining.unwrap_or(0);
                let cont = return_url
                    .map(|r| format!("<p><a href=\"{0}\">Continue to {0}</a></p>\n", html_escape(&r)))
                    .unwrap_or_default();
                let body = format!(
                    "<p>Logged in as <strong>{}</strong> from {client_ip}.</p>\n\
                     <p>Internet access granted for {}.</p>\n{cont}\
                     <form method=\"post\" action=\"/logout\"><button type=\"submit\">Log out</button></form>",
                    html_escape(st.user.as_deref().unwrap_or("")),
                    format_duration(remaining)
                );
                Reply::html(200, page("Login successful", &body))
            }
            Err(e) if json => self.error_reply(&e, true),
            Err(e) => self.login_form(false, return_url.as_deref(), Some(&e)),
        }
    }

    fn status_reply(&self, st: &SessionStatus, json: bool, html_default: bool) -> Reply {
        if json {
            return Reply::json(200, status_json(st, self.service.clock().now()));
        }
        if html_default {
            let body = "<p>You are logged out.</p>\n<p><a href=\"/login\">Log in again</a></p>";
            return Reply::html(200, page("Logged out", body));
        }
        Reply::text(200, st.to_text())
    }

    fn error_reply(&self, e: &LoginError, json: bool) -> Reply {
        if json {
            Reply::json(e.status_code(), json!({ "error": e.code(), "message": e.to_string() }))
        } else {
            Reply::html(e.status_code(), page("Login failed", &format!("<p>{}</p>", html_escape(&e.to_string()))))
        }
    }

    async fn portal_file(&self, rel: &str) -> Reply {
        let Some(root) = &self.portal_dir else {
            return Reply::text(404, "not found\n".into());
        };
        let rel = if rel.is_empty() { "index.html" } else { rel };
        let rel_path = Path::new(rel);
        if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Reply::text(404, "not found\n".into());
        }
        match tokio::fs::read(root.join(rel_path)).await {
            Ok(bytes) => Reply {
                status: 200,
                content_type: content_type_for(rel),
                body: bytes,
                extra: Headers::new(),
            },
            Err(_) => Reply::text(404, "not found\n".into()),
        }
    }
}

fn content_type_for(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

fn status_json(st: &SessionStatus, now: u64) -> serde_json::Value {
    let mut v = serde_json::to_value(st).unwrap_or_else(|_| json!({}));
    v["server_time"] = json!(now);
    v
}

fn form_value(data: &[u8], key: &str) -> Option<String> {
    url::form_urlencoded::parse(data)
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

async fn read_form_body<R: AsyncRead + Unpin>(rd: &mut BufReader<R>, head: &RequestHead) -> Result<Vec<u8>, u16> {
    match request_framing(&head.headers) {
        Ok(BodyFraming::Empty) => Ok(Vec::new()),
        Ok(BodyFraming::Length(n)) if n <= MAX_FORM_BYTES => {
            let mut body = vec![0u8; n as usize];
            rd.read_exact(&mut body).await.map_err(|_| 400u16)?;
            Ok(body)
        }
        Ok(BodyFraming::Length(_)) => Err(413),
        Ok(_) => Err(411),
        Err(_) => Err(400),
    }
}

async fn write_reply<W: AsyncWrite + Unpin>(wr: &mut W, reply: Reply, close: bool) -> io::Result<()> {
    let bytes = simple_response(reply.status, reply.content_type, &reply.body, close, &reply.extra);
    wr.write_all(&bytes).await?;
    wr.flush().await.inspect_err(|e| warn!(error = %e, "login service write failed"))
}
