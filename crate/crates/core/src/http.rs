//! Minimal HTTP/1.1 pieces shared by the proxy and the login service:
//! bounded head reading, head parsing, body framing and streaming relay.

use std::io;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use thiserror::Error;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};

/// Largest accepted request or response head.
pub const MAX_HEAD_BYTES: usize = 64 * 1024;
const MAX_HEADERS: usize = 128;
const MAX_CHUNK_LINE: usize = 4096;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("head exceeds {0} bytes")]
    TooLarge(usize),
    #[error("malformed head: {0}")]
    Malformed(String),
    #[error("connection closed mid-head")]
    UnexpectedEof,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Header list in arrival order. Names keep their original case.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<(String, Vec<u8>)>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<Vec<u8>>) {
        self.0.push((name.into(), value.into()));
    }

    /// First value for `name`, if it is valid UTF-8.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .filter(|(n, _)| n.eq_ignore_ascii_case(name))
            .find_map(|(_, v)| std::str::from_utf8(v).ok())
            .map(str::trim)
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .filter_map(|(_, v)| std::str::from_utf8(v).ok())
            .map(str::trim)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|(n, _)| n.eq_ignore_ascii_case(name))
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    /// Comma-separated tokens across every `name` header, lowercased.
    pub fn tokens(&self, name: &str) -> Vec<String> {
        self.get_all(name)
            .flat_map(|v| v.split(','))
            .map(|t| t.trim().to_ascii_lowercase())
            .filter(|t| !t.is_empty())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        for (n, v) in &self.0 {
            out.extend_from_slice(n.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(v);
            out.extend_from_slice(b"\r\n");
        }
    }
}

impl<'h> From<&[httparse::Header<'h>]> for Headers {
    fn from(hs: &[httparse::Header<'h>]) -> Self {
        Headers(hs.iter().map(|h| (h.name.to_string(), h.value.to_vec())).collect())
    }
}

/// Headers that describe one connection rather than the message.
/// `Transfer-Encoding` is deliberately absent: bodies are relayed with
/// their original framing, so the header stays accurate.
pub const HOP_BY_HOP: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-connection",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "upgrade",
];

/// Remove hop-by-hop headers, including any named in `Connection`.
pub fn strip_hop_by_hop(headers: &mut Headers) {
    let named = headers.tokens("connection");
    for name in HOP_BY_HOP.iter().copied().chain(named.iter().map(String::as_str)) {
        if name != "transfer-encoding" && name != "content-length" {
            headers.remove(name);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHead {
    pub method: String,
    pub target: String,
    /// Minor version of HTTP/1.x.
    pub minor_version: u8,
    pub headers: Headers,
}

impl RequestHead {
    pub fn wants_close(&self) -> bool {
        let conn = self.headers.tokens("connection");
        if self.minor_version == 0 {
            !conn.iter().any(|t| t == "keep-alive")
        } else {
            conn.iter().any(|t| t == "close")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseHead {
    pub minor_version: u8,
    pub status: u16,
    pub reason: String,
    pub headers: Headers,
}

pub fn parse_request_head(bytes: &[u8]) -> Result<RequestHead, HeadError> {
    let mut slots = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut slots);
    match req.parse(bytes) {
        Ok(httparse::Status::Complete(_)) => Ok(RequestHead {
            method: req.method.unwrap_or_default().to_string(),
            target: req.path.unwrap_or_default().to_string(),
            minor_version: req.version.unwrap_or(1),
            headers: Headers::from(&*req.headers),
        }),
        Ok(httparse::Status::Partial) => Err(HeadError::Malformed("incomplete request head".into())),
        Err(e) => Err(HeadError::Malformed(e.to_string())),
    }
}

pub fn parse_response_head(bytes: &[u8]) -> Result<ResponseHead, HeadError> {
    let mut slots = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut slots);
    match resp.parse(bytes) {
        Ok(httparse::Status::Complete(_)) => Ok(ResponseHead {
            minor_version: resp.version.unwrap_or(1),
            status: resp.code.unwrap_or(0),
            reason: resp.reason.unwrap_or_default().to_string(),
            headers: Headers::from(&*resp.headers),
        }),
        Ok(httparse::Status::Partial) => Err(HeadError::Malformed("incomplete response head".into())),
        Err(e) => Err(HeadError::Malformed(e.to_string())),
    }
}

/// Read one message head (through the blank line) without consuming any
/// body bytes. `Ok(None)` means the peer closed before sending anything.
pub async fn read_head<R: AsyncBufRead + Unpin>(
    reader: &mut R,
    limit: usize,
) -> Result<Option<Vec<u8>>, HeadError> {
    let mut head = Vec::new();
    loop {
        let available = reader.fill_buf().await?;
        if available.is_empty() {
            return if head.is_empty() {
                Ok(None)
            } else {
                Err(HeadError::UnexpectedEof)
            };
        }
        // Tolerate blank lines before a request line.
        let mut skip = 0;
        if head.is_empty() {
            while skip < available.len() && matches!(available[skip], b'\r' | b'\n') {
                skip += 1;
            }
            if skip == available.len() {
                reader.consume(skip);
                continue;
            }
        }
        let search_from = head.len().saturating_sub(3);
        let before = head.len();
        head.extend_from_slice(&available[skip..]);
        let end = find_head_end(&head[search_from..]).map(|i| search_from + i);
        match end {
            Some(end) => {
                let used = end - before;
                reader.consume(skip + used);
                head.truncate(end);
                if head.len() > limit {
                    return Err(HeadError::TooLarge(limit));
                }
                return Ok(Some(head));
            }
            None => {
                let n = available.len();
                reader.consume(n);
                if head.len() > limit {
                    return Err(HeadError::TooLarge(limit));
                }
            }
        }
    }
}

/// Index just past the terminating blank line.
fn find_head_end(buf: &[u8]) -> Option<usize> {
    for i in 0..buf.len() {
        if buf[i..].starts_with(b"\r\n\r\n") {
            return Some(i + 4);
        }
        if buf[i..].starts_with(b"\n\n") {
            return Some(i + 2);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyFraming {
    Empty,
    Length(u64),
    Chunked,
    /// Response body delimited by connection close.
    UntilClose,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FramingError {
    #[error("conflicting Content-Length and Transfer-Encoding")]
    Conflicting,
    #[error("invalid Content-Length")]
    BadLength,
    #[error("unsupported transfer coding {0:?}")]
    UnsupportedCoding(String),
}

fn content_length(headers: &Headers) -> Result<Option<u64>, FramingError> {
    let mut values = headers
        .get_all("content-length")
        .flat_map(|v| v.split(','))
        .map(str::trim);
    let Some(first) = values.next() else {
        return Ok(None);
    };
    let n: u64 = first.parse().map_err(|_| FramingError::BadLength)?;
    if values.any(|v| v != first) {
        return Err(FramingError::BadLength);
    }
    Ok(Some(n))
}

pub fn request_framing(headers: &Headers) -> Result<BodyFraming, FramingError> {
    let te = headers.tokens("transfer-encoding");
    let cl = content_length(headers)?;
    if !te.is_empty() {
        if cl.is_some() {
            return Err(FramingError::Conflicting);
        }
        return if te.last().map(String::as_str) == Some("chunked") {
            Ok(BodyFraming::Chunked)
        } else {
            Err(FramingError::UnsupportedCoding(te.join(", ")))
        };
    }
    Ok(match cl {
        Some(0) | None => BodyFraming::Empty,
        Some(n) => BodyFraming::Length(n),
    })
}

pub fn response_framing(request_method: &str, head: &ResponseHead) -> Result<BodyFraming, FramingError> {
    if request_method.eq_ignore_ascii_case("HEAD")
        || (100..200).contains(&head.status)
        || head.status == 204
        || head.status == 304
    {
        return Ok(BodyFraming::Empty);
    }
    let te = head.headers.tokens("transfer-encoding");
    if !te.is_empty() {
        return Ok(if te.last().map(String::as_str) == Some("chunked") {
            BodyFraming::Chunked
        } else {
            BodyFraming::UntilClose
        });
    }
    Ok(match content_length(&head.headers)? {
        Some(0) => BodyFraming::Empty,
        Some(n) => BodyFraming::Length(n),
        None => BodyFraming::UntilClose,
    })
}

/// Largest number of body bytes held in proxy memory at any one moment,
/// and the total relayed, across every relay sharing the meter.
#[derive(Debug, Default)]
pub struct RelayMeter {
    peak: AtomicUsize,
    total: AtomicU64,
}

impl RelayMeter {
    fn record(&self, held: usize) {
        self.peak.fetch_max(held, Ordering::Relaxed);
        self.total.fetch_add(held as u64, Ordering::Relaxed);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("source closed before the body was complete")]
    Truncated,
    #[error("reading body: {0}")]
    Source(io::Error),
    #[error("writing body: {0}")]
    Sink(io::Error),
    #[error("bad chunked framing: {0}")]
    BadChunk(String),
}

/// Copy one body from `src` to `dst`, framing bytes included, straight
/// out of the reader's buffer. Returns bytes written.
pub async fn relay_body<R, W>(
    framing: BodyFraming,
    src: &mut R,
    dst: &mut W,
    meter: &RelayMeter,
) -> Result<u64, RelayError>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let written = match framing {
        BodyFraming::Empty => 0,
        BodyFraming::Length(n) => copy_exact(src, dst, n, meter).await?,
        BodyFraming::UntilClose => copy_to_eof(src, dst, meter).await?,
        BodyFraming::Chunked => relay_chunked(src, dst, meter).await?,
    };
    dst.flush().await.map_err(RelayError::Sink)?;
    Ok(written)
}

async fn copy_exact<R, W>(src: &mut R, dst: &mut W, mut left: u64, meter: &RelayMeter) -> Result<u64, RelayError>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let total = left;
    while left > 0 {
        let buf = src.fill_buf().await.map_err(RelayError::Source)?;
        if buf.is_empty() {
            return Err(RelayError::Truncated);
        }
        let n = buf.len().min(usize::try_from(left).unwrap_or(usize::MAX));
        meter.record(n);
        dst.write_all(&buf[..n]).await.map_err(RelayError::Sink)?;
        src.consume(n);
        left -= n as u64;
    }
    Ok(total)
}

async fn copy_to_eof<R, W>(src: &mut R, dst: &mut W, meter: &RelayMeter) -> Result<u64, RelayError>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut total = 0u64;
    loop {
        let buf = src.fill_buf().await.map_err(RelayError::Source)?;
        if buf.is_empty() {
            return Ok(total);
        }
        let n = buf.len();
        meter.record(n);
        dst.write_all(buf).await.map_err(RelayError::Sink)?;
        src.consume(n);
        total += n as u64;
    }
}

async fn read_line_limited<R: AsyncBufRead + Unpin>(src: &mut R) -> Result<Vec<u8>, RelayError> {
    let mut line = Vec::new();
    loop {
        let buf = src.fill_buf().await.map_err(RelayError::Source)?;
        if buf.is_empty() {
            return Err(RelayError::Truncated);
        }
        match buf.iter().position(|&b| b == b'\n') {
            Some(i) => {
                line.extend_from_slice(&buf[..=i]);
                src.consume(i + 1);
                return Ok(line);
            }
            None => {
                let n = buf.len();
                line.extend_from_slice(buf);
                src.consume(n);
            }
        }
        if line.len() > MAX_CHUNK_LINE {
            return Err(RelayError::BadChunk("chunk line too long".into()));
        }
    }
}

fn chunk_size(line: &[u8]) -> Result<u64, RelayError> {
    let text = std::str::from_utf8(line).map_err(|_| RelayError::BadChunk("non-ASCII chunk size".into()))?;
    let size = text.split(';').next().unwrap_or("").trim();
    if size.is_empty() || size.len() > 16 {
        return Err(RelayError::BadChunk(format!("bad chunk size {size:?}")));
    }
    u64::from_str_radix(size, 16).map_err(|_| RelayError::BadChunk(format!("bad chunk size {size:?}")))
}

async fn relay_chunked<R, W>(src: &mut R, dst: &mut W, meter: &RelayMeter) -> Result<u64, RelayError>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut total = 0u64;
    loop {
        let line = read_line_limited(src).await?;
        let size = chunk_size(&line)?;
        dst.write_all(&line).await.map_err(RelayError::Sink)?;
        total += line.len() as u64;
        if size == 0 {
            // trailers, then the final blank line
            loop {
                let t = read_line_limited(src).await?;
                dst.write_all(&t).await.map_err(RelayError::Sink)?;
                total += t.len() as u64;
                if t == b"\r\n" || t == b"\n" {
                    return Ok(total);
                }
            }
        }
        total += copy_exact(src, dst, size, meter).await?;
        let crlf = read_line_limited(src).await?;
        if crlf != b"\r\n" && crlf != b"\n" {
            return Err(RelayError::BadChunk("missing CRLF after chunk data".into()));
        }
        dst.write_all(&crlf).await.map_err(RelayError::Sink)?;
        total += crlf.len() as u64;
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        100 => "Continue",
        200 => "OK",
        204 => "No Content",
        303 => "See Other",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        411 => "Length Required",
        413 => "Content Too Large",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "",
    }
}

/// A complete response with a fixed body.
pub fn simple_response(status: u16, content_type: &str, body: &[u8], close: bool, extra: &Headers) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {} {}\r\n", status, reason_phrase(status)).into_bytes();
    let mut headers = Headers::new();
    headers.push("Content-Type", content_type);
    headers.push("Content-Length", body.len().to_string());
    headers.push("Cache-Control", "no-store");
    if close {
        headers.push("Connection", "close");
    }
    headers.write_to(&mut out);
    extra.write_to(&mut out);
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body);
    out
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}
