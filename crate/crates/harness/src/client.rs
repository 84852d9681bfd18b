//! Just enough of an HTTP/1.1 client to drive the proxy and login service.

use std::io;

use ipgate::http::{parse_response_head, read_head, response_framing, BodyFraming, Headers, MAX_HEAD_BYTES};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader, ReadHalf, WriteHalf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Headers,
    /// Body with any chunked framing removed.
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// `GET` in origin form, as an intercepted browser sends it.
pub fn origin_form_get(uri: &str) -> io::Result<Vec<u8>> {
    let rest = uri
        .strip_prefix("http://")
        .ok_or_else(|| bad(format!("not an http URI: {uri}")))?;
    let (authority, path) = match rest.find(['/', '?']) {
        Some(i) if rest.as_bytes()[i] == b'/' => (&rest[..i], rest[i..].to_string()),
        Some(i) => (&rest[..i], format!("/{}", &rest[i..])),
        None => (rest, "/".to_string()),
    };
    Ok(format!("GET {path} HTTP/1.1\r\nHost: {authority}\r\nUser-Agent: ipgate-harness\r\nAccept: */*\r\n\r\n").into_bytes())
}

pub fn form_post(path: &str, host: &str, fields: &[(&str, &str)], accept_json: bool) -> Vec<u8> {
    let body = url::form_urlencoded::Serializer::new(String::new())
        .extend_pairs(fields)
        .finish();
    let accept = if accept_json { "application/json" } else { "text/html" };
    format!(
        "POST {path} HTTP/1.1\r\nHost: {host}\r\nAccept: {accept}\r\n\
         Content-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .into_bytes()
}

/// One client connection; requests are sent one at a time.
pub struct HttpClient<S> {
    rd: BufReader<ReadHalf<S>>,
    wr: WriteHalf<S>,
}

impl<S: AsyncRead + AsyncWrite> HttpClient<S> {
    pub fn new(stream: S) -> Self {
        let (rd, wr) = tokio::io::split(stream);
        HttpClient {
            rd: BufReader::new(rd),
            wr,
        }
    }

    /// Send `raw` verbatim and read one response to it.
    pub async fn send(&mut self, raw: &[u8]) -> io::Result<HttpResponse> {
        self.wr.write_all(raw).await?;
        self.wr.flush().await?;
        let method = raw.split(|b| *b == b' ').next().unwrap_or(b"GET");
        self.read_response(&String::from_utf8_lossy(method)).await
    }

    pub async fn get(&mut self, uri: &str) -> io::Result<HttpResponse> {
        self.send(&origin_form_get(uri)?).await
    }

    /// Reads past any 1xx interim responses.
    pub async fn read_response(&mut self, method: &str) -> io::Result<HttpResponse> {
        loop {
            let raw = read_head(&mut self.rd, MAX_HEAD_BYTES)
                .await
                .map_err(|e| bad(e.to_string()))?
                .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed before response"))?;
            let head = parse_response_head(&raw).map_err(|e| bad(e.to_string()))?;
            if (100..200).contains(&head.status) {
                continue;
            }
            let framing = response_framing(method, &head).map_err(|e| bad(e.to_string()))?;
            let body = match framing {
                BodyFraming::Empty => Vec::new(),
                BodyFraming::Length(n) => {
                    let mut body = vec![0; n as usize];
                    self.rd.read_exact(&mut body).await?;
                    body
                }
                BodyFraming::UntilClose => {
                    let mut body = Vec::new();
                    self.rd.read_to_end(&mut body).await?;
                    body
                }
                BodyFraming::Chunked => self.read_chunked().await?,
            };
            return Ok(HttpResponse {
                status: head.status,
                headers: head.headers,
                body,
            });
        }
    }

    async fn read_chunked(&mut self) -> io::Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            self.rd.read_line(&mut line).await?;
            let size_field = line.trim().split(';').next().unwrap_or("");
            let size = usize::from_str_radix(size_field, 16).map_err(|_| bad(format!("bad chunk size {line:?}")))?;
            if size == 0 {
                // trailers until the blank line
                loop {
                    line.clear();
                    if self.rd.read_line(&mut line).await? == 0 || line.trim().is_empty() {
                        return Ok(body);
                    }
                }
            }
            let start = body.len();
            body.resize(start + size, 0);
            self.rd.read_exact(&mut body[start..]).await?;
            let mut crlf = [0u8; 2];
            self.rd.read_exact(&mut crlf).await?;
        }
    }
}
