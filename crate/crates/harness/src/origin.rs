//! In-process origin server with deterministic, path-keyed responses.
//!
//! | path              | response                                              |
//! |-------------------|-------------------------------------------------------|
//! | `/echo`           | the request head and body as received                 |
//! | `/chunked/...`    | `body_for` the path, chunked in 100-byte pieces        |
//! | `/close/...`      | `body_for` the path, delimited by connection close     |
//! | `/big/<n>`        | `n` pattern bytes (see [`big_byte`])                   |
//! | `/truncate/<n>`   | announces `n` bytes, sends half, then closes           |
//! | `/slow/<ms>/...`  | `body_for` the path after sleeping `ms` milliseconds  |
//! | anything else     | `body_for` the path with a Content-Length             |

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ipgate::http::{
    parse_request_head, read_head, relay_body, request_framing, BodyFraming, RelayMeter, RequestHead,
    MAX_HEAD_BYTES,
};
use parking_lot::Mutex;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

/// What the origin received for one request.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub head: RequestHead,
    pub raw_head: Vec<u8>,
    pub body: Vec<u8>,
    pub peer: SocketAddr,
}

#[derive(Debug, Default)]
pub struct OriginStats {
    connections: AtomicU64,
    requests: AtomicU64,
    log: Mutex<Vec<RecordedRequest>>,
    keep_log: bool,
}

impl OriginStats {
    pub fn connections(&self) -> u64 {
        self.connections.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn recorded(&self) -> Vec<RecordedRequest> {
        self.log.lock().clone()
    }

    pub fn last(&self) -> Option<RecordedRequest> {
        self.log.lock().last().cloned()
    }
}

/// Deterministic body for a request path: a readable first line, then
/// bytes derived from the path covering the full 0..=255 range.
pub fn body_for(path: &str) -> Vec<u8> {
    let mut body = format!("stub origin: {path}\n").into_bytes();
    let mut state = path.bytes().fold(0x811c_9dc5u32, |h, b| (h ^ u32::from(b)).wrapping_mul(0x0100_0193));
    let extra = 256 + (state % 2048) as usize;
    for _ in 0..extra {
        state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        body.push((state >> 24) as u8);
    }
    body
}

/// Byte `i` of a `/big/<n>` body.
pub fn big_byte(i: u64) -> u8 {
    (i % 251) as u8
}

pub struct StubOrigin {
    addr: SocketAddr,
    stats: Arc<OriginStats>,
    task: JoinHandle<()>,
}

impl StubOrigin {
    pub async fn start() -> io::Result<Self> {
        Self::start_with(true).await
    }

    /// Without the request log, for long benchmark runs.
    pub async fn start_unrecorded() -> io::Result<Self> {
        Self::start_with(false).await
    }

    async fn start_with(keep_log: bool) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(OriginStats {
            keep_log,
            ..OriginStats::default()
        });
        let s = stats.clone();
        let task = tokio::spawn(async move {
            while let Ok((stream, peer)) = listener.accept().await {
                s.connections.fetch_add(1, Ordering::Relaxed);
                let _ = stream.set_nodelay(true);
                tokio::spawn(serve(stream, peer, s.clone()));
            }
        });
        Ok(StubOrigin { addr, stats, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &Arc<OriginStats> {
        &self.stats
    }
}

impl Drop for StubOrigin {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve(stream: TcpStream, peer: SocketAddr, stats: Arc<OriginStats>) {
    let (rd, mut wr) = stream.into_split();
    let mut rd = BufReader::new(rd);
    let meter = RelayMeter::default();
    loop {
        let Ok(Some(raw_head)) = read_head(&mut rd, MAX_HEAD_BYTES).await else {
            return;
        };
        let Ok(head) = parse_request_head(&raw_head) else {
            let _ = wr.write_all(b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n").await;
            return;
        };
        let mut body = Vec::new();
        let framing = request_framing(&head.headers).unwrap_or(BodyFraming::Empty);
        if relay_body(framing, &mut rd, &mut body, &meter).await.is_err() {
            return;
        }
        stats.requests.fetch_add(1, Ordering::Relaxed);
        let close = head.wants_close();
        let path = head.target.clone();
        if stats.keep_log {
            stats.log.lock().push(RecordedRequest {
                head: head.clone(),
                raw_head: raw_head.clone(),
                body: body.clone(),
                peer,
            });
        }
        let conn = if close { "Connection: close\r\n" } else { "" };
        let result = if path == "/echo" {
            let mut payload = raw_head;
            payload.extend_from_slice(&body);
            respond(&mut wr, conn, &payload).await
        } else if path.starts_with("/chunked") {
            let payload = body_for(&path);
            let mut out = format!("HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nTransfer-Encoding: chunked\r\n{conn}\r\n")
                .into_bytes();
            for piece in payload.chunks(100) {
                out.extend_from_slice(format!("{:x}\r\n", piece.len()).as_bytes());
                out.extend_from_slice(piece);
                out.extend_from_slice(b"\r\n");
            }
            out.extend_from_slice(b"0\r\n\r\n");
            wr.write_all(&out).await
        } else if path.starts_with("/close") {
            let mut out = b"HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n".to_vec();
            out.extend_from_slice(&body_for(&path));
            let _ = wr.write_all(&out).await;
            return;
        } else if let Some(n) = path.strip_prefix("/big/").and_then(|n| n.parse::<u64>().ok()) {
            send_big(&mut wr, conn, n).await
        } else if let Some(n) = path.strip_prefix("/truncate/").and_then(|n| n.parse::<u64>().ok()) {
            let mut out = format!("HTTP/1.1 200 OK\r\nContent-Length: {n}\r\n\r\n").into_bytes();
            out.extend((0..n / 2).map(big_byte));
            let _ = wr.write_all(&out).await;
            return;
        } else if let Some(rest) = path.strip_prefix("/slow/") {
            let ms = rest.split('/').next().and_then(|m| m.parse().ok()).unwrap_or(0);
            tokio::time::sleep(Duration::from_millis(ms)).await;
            respond(&mut wr, conn, &body_for(&path)).await
        } else {
            respond(&mut wr, conn, &body_for(&path)).await
        };
        if result.is_err() || close {
            let _ = wr.shutdown().await;
            return;
        }
    }
}

async fn respond<W: AsyncWriteExt + Unpin>(wr: &mut W, conn: &str, body: &[u8]) -> io::Result<()> {
    let mut out = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\nX-Stub: 1\r\n{conn}\r\n",
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    wr.write_all(&out).await
}

async fn send_big<W: AsyncWriteExt + Unpin>(wr: &mut W, conn: &str, n: u64) -> io::Result<()> {
    let head = format!("HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nContent-Length: {n}\r\n{conn}\r\n");
    wr.write_all(head.as_bytes()).await?;
    let mut sent = 0u64;
    let mut buf = Vec::with_capacity(64 * 1024);
    while sent < n {
        buf.clear();
        let take = (n - sent).min(64 * 1024);
        buf.extend((sent..sent + take).map(big_byte));
        wr.write_all(&buf).await?;
        sent += take;
    }
    Ok(())
}
