//! Proxy behaviour against a scripted origin server.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ipgate::proxy::{MemoryAccessLog, Proxy, ProxySettings, UpstreamConnector};
use ipgate::{AclEngine, AclPolicy, ManualClock, MemoryStore, PolicyMode, SessionStore, VerdictAction};
use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

const USER_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 20);
const ANON_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 21);

enum Reply {
    Raw(Vec<u8>),
    /// Content-Length `n` of pattern bytes, written in 64 KiB pieces.
    Big(usize),
    /// Send these bytes, then close without finishing.
    Cut(Vec<u8>),
}

struct Origin {
    addr: SocketAddr,
    connections: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<Vec<u8>>>>,
}

fn pattern(i: usize) -> u8 {
    (i * 7 % 256) as u8
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

async fn origin(routes: Vec<(&'static str, Reply)>) -> Origin {
    let routes: Arc<HashMap<&'static str, Reply>> = Arc::new(routes.into_iter().collect());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let connections = Arc::new(AtomicUsize::new(0));
    let requests = Arc::new(Mutex::new(Vec::new()));
    let (c, r) = (connections.clone(), requests.clone());
    tokio::spawn(async move {
        while let Ok((mut sock, _)) = listener.accept().await {
            c.fetch_add(1, Ordering::SeqCst);
            let (routes, requests) = (routes.clone(), r.clone());
            tokio::spawn(async move {
                let mut buf = Vec::new();
                let head_end = loop {
                    if let Some(i) = find(&buf, b"\r\n\r\n") {
                        break i + 4;
                    }
                    let mut chunk = [0u8; 8192];
                    match sock.read(&mut chunk).await {
                        Ok(0) | Err(_) => return,
                        Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    }
                };
                let head = String::from_utf8_lossy(&buf[..head_end]).to_ascii_lowercase();
                let len = head
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse::<usize>().unwrap())
                    .unwrap_or(0);
                while buf.len() < head_end + len {
                    let mut chunk = [0u8; 8192];
                    match sock.read(&mut chunk).await {
                        Ok(0) | Err(_) => return,
                        Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    }
                }
                let path = head.split_whitespace().nth(1).unwrap_or("/").to_string();
                requests.lock().push(buf.clone());
                match routes.get(path.as_str()) {
                    Some(Reply::Raw(bytes)) => {
                        let _ = sock.write_all(bytes).await;
                    }
                    Some(Reply::Cut(bytes)) => {
                        let _ = sock.write_all(bytes).await;
                        return;
                    }
                    Some(Reply::Big(n)) => {
                        let head = format!("HTTP/1.1 200 OK\r\nContent-Length: {n}\r\n\r\n");
                        if sock.write_all(head.as_bytes()).await.is_err() {
                            return;
                        }
                        let mut sent = 0;
                        while sent < *n {
                            let piece: Vec<u8> = (sent..(sent + 65536).min(*n)).map(pattern).collect();
                            if sock.write_all(&piece).await.is_err() {
                                return;
                            }
                            sent += piece.len();
                        }
                    }
                    None => {
                        let _ = sock.write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n").await;
                    }
                }
                let _ = sock.shutdown().await;
            });
        }
    });
    Origin {
        addr,
        connections,
        requests,
    }
}

struct Rig {
    proxy: Arc<Proxy>,
    log: Arc<MemoryAccessLog>,
}

fn rig(mode: PolicyMode, domains: &[&str], upstream: SocketAddr) -> Rig {
    let store = Arc::new(MemoryStore::new());
    store
        .insert_session(USER_IP, "alice", &["internet".to_string()], 3600, 1_000)
        .unwrap();
    let policy = AclPolicy::new(mode, domains, "internet").unwrap();
    let engine = Arc::new(AclEngine::new(policy, store));
    let log = Arc::new(MemoryAccessLog::default());
    let proxy = Arc::new(Proxy::new(
        engine,
        Arc::new(ManualClock::new(1_000)),
        ProxySettings::new("http://10.0.0.1:8080/login".parse().unwrap()),
        UpstreamConnector::new(Duration::from_secs(2)).with_default_route(upstream),
        log.clone(),
    ));
    Rig { proxy, log }
}

/// Write `raw`, half-close, and collect everything the proxy sends back.
async fn exchange(rig: &Rig, ip: Ipv4Addr, raw: &[u8]) -> Vec<u8> {
    let (mut client, server) = tokio::io::duplex(64 * 1024);
    let proxy = rig.proxy.clone();
    let task = tokio::spawn(async move { proxy.handle_connection(server, ip).await });
    client.write_all(raw).await.unwrap();
    client.shutdown().await.unwrap();
    let mut out = Vec::new();
    tokio::time::timeout(Duration::from_secs(10), client.read_to_end(&mut out))
        .await
        .expect("proxy answered in time")
        .unwrap();
    task.await.unwrap();
    out
}

fn split_response(raw: &[u8]) -> (String, &[u8]) {
    let end = find(raw, b"\r\n\r\n").expect("complete head") + 4;
    (String::from_utf8_lossy(&raw[..end]).into_owned(), &raw[end..])
}

fn get(host: &str, path: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n").into_bytes()
}

#[tokio::test]
async fn relays_body_byte_for_byte() {
    let body: Vec<u8> = (0..=255u8).cycle().take(4096).collect();
    let mut resp = b"HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nX-Origin: yes\r\nContent-Length: 4096\r\n\r\n".to_vec();
    resp.extend_from_slice(&body);
    let o = origin(vec![("/file", Reply::Raw(resp))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    let raw = exchange(&rig, USER_IP, &get("www.example.com", "/file")).await;
    let (head, got) = split_response(&raw);
    assert!(head.starts_with("HTTP/1.1 200 OK\r\n"), "{head}");
    assert!(head.contains("X-Origin: yes\r\n"));
    assert!(head.contains("Via: 1.1 ipgate\r\n"));
    assert_eq!(got, &body[..]);
    let entries = rig.log.entries();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].client_ip, USER_IP);
    assert_eq!(entries[0].uri, "http://www.example.com/file");
    assert_eq!(entries[0].verdict, Some(VerdictAction::Allow));
    assert_eq!(entries[0].user.as_deref(), Some("alice"));
}

#[tokio::test]
async fn chunked_body_is_relayed_verbatim() {
    let chunks = b"5;ext=1\r\nhello\r\n6\r\n world\r\n0\r\nX-Trailer: t\r\n\r\n";
    let mut resp = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n".to_vec();
    resp.extend_from_slice(chunks);
    let o = origin(vec![("/c", Reply::Raw(resp))]).await;
    let rig = rig(PolicyMode::Blacklist, &[], o.addr);
    let raw = exchange(&rig, ANON_IP, &get("example.com", "/c")).await;
    let (head, body) = split_response(&raw);
    assert!(head.contains("Transfer-Encoding: chunked\r\n"));
    assert_eq!(body, chunks);
}

#[tokio::test]
async fn large_body_streams_with_bounded_buffering() {
    const SIZE: usize = 10 * 1024 * 1024;
    let o = origin(vec![("/big", Reply::Big(SIZE))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    let raw = exchange(&rig, USER_IP, &get("files.example", "/big")).await;
    let (_, body) = split_response(&raw);
    assert_eq!(body.len(), SIZE);
    assert!(body.iter().enumerate().all(|(i, b)| *b == pattern(i)));
    let peak = rig.proxy.meter().peak();
    assert!(peak > 0 && peak < 1024 * 1024, "peak buffered {peak}");
}

#[tokio::test]
async fn upstream_dying_mid_body_closes_the_client() {
    let mut cut = b"HTTP/1.1 200 OK\r\nContent-Length: 1000\r\n\r\n".to_vec();
    cut.extend_from_slice(&[b'x'; 10]);
    let o = origin(vec![("/cut", Reply::Cut(cut))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    // keep-alive request: only the proxy closing ends read_to_end
    let raw = exchange(&rig, USER_IP, b"GET /cut HTTP/1.1\r\nHost: a.example\r\n\r\n").await;
    let (head, body) = split_response(&raw);
    assert!(head.contains("Content-Length: 1000"));
    assert_eq!(body.len(), 10);
}

#[tokio::test]
async fn unreachable_upstream_is_502() {
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        l.local_addr().unwrap()
    };
    let rig = rig(PolicyMode::Whitelist, &[], dead);
    let raw = exchange(&rig, USER_IP, &get("gone.example", "/")).await;
    assert!(raw.starts_with(b"HTTP/1.1 502 "), "{}", String::from_utf8_lossy(&raw));
    assert_eq!(rig.log.entries()[0].status, 502);
}

#[tokio::test]
async fn malformed_requests() {
    let o = origin(vec![]).await;
    let rig = rig(PolicyMode::Blacklist, &[], o.addr);

    let raw = exchange(&rig, ANON_IP, b"GET / HTTP/1.0\r\n\r\n").await;
    assert!(raw.starts_with(b"HTTP/1.1 400 "), "missing host");

    let mut huge = b"GET / HTTP/1.1\r\nHost: a\r\nX-Big: ".to_vec();
    huge.extend_from_slice(&vec![b'a'; 70 * 1024]);
    huge.extend_from_slice(b"\r\n\r\n");
    let raw = exchange(&rig, ANON_IP, &huge).await;
    assert!(raw.starts_with(b"HTTP/1.1 431 "), "oversized head");

    let raw = exchange(&rig, ANON_IP, b"NOT HTTP AT ALL\r\n\r\n").await;
    assert!(raw.starts_with(b"HTTP/1.1 400 "), "garbage");

    let raw = exchange(&rig, ANON_IP, b"CONNECT example.com:443 HTTP/1.1\r\nHost: example.com:443\r\n\r\n").await;
    assert!(raw.starts_with(b"HTTP/1.1 403 "), "connect");

    let raw = exchange(
        &rig,
        ANON_IP,
        b"POST / HTTP/1.1\r\nHost: a\r\nContent-Length: 3\r\nTransfer-Encoding: chunked\r\n\r\n",
    )
    .await;
    assert!(raw.starts_with(b"HTTP/1.1 400 "), "ambiguous framing");
    assert_eq!(o.connections.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn denied_requests_never_reach_upstream() {
    let o = origin(vec![("/", Reply::Raw(b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n".to_vec()))]).await;
    let rig = rig(PolicyMode::Whitelist, &["www.approved.org"], o.addr);
    let raw = exchange(&rig, ANON_IP, &get("www.example.com", "/?q=1")).await;
    let text = String::from_utf8_lossy(&raw);
    assert!(text.starts_with("HTTP/1.1 403 "));
    assert!(text.contains("http://10.0.0.1:8080/login?return=http%3A%2F%2Fwww.example.com%2F%3Fq%3D1"));
    assert_eq!(o.connections.load(Ordering::SeqCst), 0);
    assert_eq!(rig.log.entries()[0].verdict, Some(VerdictAction::DenyNeedsLogin));

    // approved site needs no login
    let raw = exchange(&rig, ANON_IP, &get("www.approved.org", "/")).await;
    assert!(raw.starts_with(b"HTTP/1.1 200 "));
    // the login service itself is always reachable
    let raw = exchange(&rig, ANON_IP, &get("10.0.0.1:8080", "/")).await;
    assert!(raw.starts_with(b"HTTP/1.1 200 "));
    assert_eq!(o.connections.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn blacklisted_site_page_has_no_login_link_for_blocked() {
    let o = origin(vec![("/", Reply::Raw(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok".to_vec()))]).await;
    let rig = rig(PolicyMode::Blacklist, &[".facebook.com"], o.addr);
    let raw = exchange(&rig, ANON_IP, &get("www.facebook.com", "/")).await;
    let text = String::from_utf8_lossy(&raw);
    assert!(text.starts_with("HTTP/1.1 403 "));
    assert!(text.contains("blocked"));
    assert_eq!(rig.log.entries()[0].verdict, Some(VerdictAction::DenyBlacklisted));
    // logged-in users bypass the list
    let raw = exchange(&rig, USER_IP, &get("www.facebook.com", "/")).await;
    assert!(raw.ends_with(b"\r\n\r\nok"));
}

#[tokio::test]
async fn upstream_request_is_cleaned_and_body_forwarded() {
    let o = origin(vec![("/submit", Reply::Raw(b"HTTP/1.1 204 No Content\r\n\r\n".to_vec()))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    let req = b"POST /submit HTTP/1.1\r\nUser-Agent: t\r\nHost: forms.example\r\nConnection: close, X-Hop\r\nX-Hop: 1\r\n\
                Keep-Alive: timeout=5\r\nProxy-Authorization: secret\r\nContent-Length: 11\r\n\r\nhello=world";
    let raw = exchange(&rig, USER_IP, req).await;
    assert!(raw.starts_with(b"HTTP/1.1 204 "));
    let seen = o.requests.lock()[0].clone();
    let text = String::from_utf8_lossy(&seen);
    assert!(text.starts_with("POST /submit HTTP/1.1\r\nHost: forms.example\r\n"), "{text}");
    for gone in ["X-Hop", "Keep-Alive", "Proxy-Authorization"] {
        assert!(!text.contains(gone), "{gone} forwarded: {text}");
    }
    assert!(text.contains("Via: 1.1 ipgate\r\n"));
    assert!(text.contains("User-Agent: t\r\n"));
    assert!(text.ends_with("\r\n\r\nhello=world"));
}

#[tokio::test]
async fn expect_continue_is_answered() {
    let o = origin(vec![("/up", Reply::Raw(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok".to_vec()))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    let (mut client, server) = tokio::io::duplex(64 * 1024);
    let proxy = rig.proxy.clone();
    tokio::spawn(async move { proxy.handle_connection(server, USER_IP).await });
    client
        .write_all(b"PUT /up HTTP/1.1\r\nHost: u.example\r\nExpect: 100-continue\r\nContent-Length: 4\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut interim = [0u8; 25];
    client.read_exact(&mut interim).await.unwrap();
    assert_eq!(&interim, b"HTTP/1.1 100 Continue\r\n\r\n");
    client.write_all(b"data").await.unwrap();
    let mut rest = Vec::new();
    client.read_to_end(&mut rest).await.unwrap();
    assert!(rest.starts_with(b"HTTP/1.1 200 OK"));
    assert!(o.requests.lock()[0].ends_with(b"\r\n\r\ndata"));
    assert!(!String::from_utf8_lossy(&o.requests.lock()[0]).contains("Expect"));
}

#[tokio::test]
async fn keep_alive_serves_several_requests() {
    let ok = |b: &str| Reply::Raw(format!("HTTP/1.1 200 OK\r\nContent-Length: {}\r\n\r\n{b}", b.len()).into_bytes());
    let o = origin(vec![("/1", ok("one")), ("/2", ok("two"))]).await;
    let rig = rig(PolicyMode::Whitelist, &["k.example"], o.addr);
    let reqs = b"GET /1 HTTP/1.1\r\nHost: k.example\r\n\r\nGET http://k.example/2 HTTP/1.1\r\nHost: ignored.example\r\n\r\n\
                 GET /1 HTTP/1.1\r\nHost: k.example\r\nConnection: close\r\n\r\n";
    let raw = exchange(&rig, ANON_IP, reqs).await;
    let text = String::from_utf8_lossy(&raw);
    assert_eq!(text.matches("HTTP/1.1 200 OK").count(), 3, "{text}");
    assert!(text.contains("\r\n\r\none") && text.contains("\r\n\r\ntwo"));
    let uris: Vec<_> = rig.log.entries().into_iter().map(|e| e.uri).collect();
    assert_eq!(uris, ["http://k.example/1", "http://k.example/2", "http://k.example/1"]);
}

#[tokio::test]
async fn real_socket_source_address_is_used() {
    let o = origin(vec![("/", Reply::Raw(b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n".to_vec()))]).await;
    let rig = rig(PolicyMode::Whitelist, &[], o.addr);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(rig.proxy.clone().serve(listener));
    let mut sock = TcpStream::connect(addr).await.unwrap();
    sock.write_all(&get("x.example", "/")).await.unwrap();
    let mut out = Vec::new();
    sock.read_to_end(&mut out).await.unwrap();
    // 127.0.0.1 has no session in a whitelist-only policy
    assert!(out.starts_with(b"HTTP/1.1 403 "));
    assert_eq!(rig.log.entries()[0].client_ip, Ipv4Addr::LOCALHOST);
}
