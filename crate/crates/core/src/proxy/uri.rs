use std::fmt;

use thiserror::Error;

use crate::http::{parse_request_head, Headers};

/// Where an intercepted request is really going.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetUri {
    /// Lowercase host name or IP literal (IPv6 literals keep brackets).
    pub host: String,
    pub port: u16,
    /// Origin-form path plus query; always starts with `/`.
    pub path: String,
}

impl TargetUri {
    /// Authority as it appears in a URI: port omitted when it is 80.
    pub fn authority(&self) -> String {
        if self.port == 80 {
            self.host.clone()
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }

    pub fn absolute(&self) -> String {
        format!("http://{}{}", self.authority(), self.path)
    }
}

impl fmt::Display for TargetUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.absolute())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UriError {
    #[error("origin-form request without a Host header")]
    MissingHost,
    #[error("invalid host {0:?}")]
    BadHost(String),
    #[error("invalid port in {0:?}")]
    BadPort(String),
    #[error("unsupported request target {0:?}")]
    UnsupportedTarget(String),
    #[error("malformed request line: {0}")]
    BadRequestLine(String),
}

fn valid_host(host: &str) -> bool {
    if let Some(inner) = host.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
        return !inner.is_empty() && inner.chars().all(|c| c.is_ascii_hexdigit() || c == ':' || c == '.');
    }
    !host.is_empty()
        && host.len() <= 253
        && !host.starts_with('.')
        && host
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_')
}

/// Split `host[:port]`, lowercasing the host.
pub fn parse_authority(authority: &str) -> Result<(String, u16), UriError> {
    let authority = authority.trim();
    if authority.contains('@') {
        return Err(UriError::BadHost(authority.to_string()));
    }
    let (host, port) = if authority.starts_with('[') {
        match authority.find(']') {
            Some(i) => {
                let rest = &authority[i + 1..];
                let port = match rest.strip_prefix(':') {
                    Some(p) => Some(p),
                    None if rest.is_empty() => None,
                    None => return Err(UriError::BadHost(authority.to_string())),
                };
                (&authority[..=i], port)
            }
            None => return Err(UriError::BadHost(authority.to_string())),
        }
    } else {
        match authority.rsplit_once(':') {
            Some((h, p)) => (h, Some(p)),
            None => (authority, None),
        }
    };
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    if !valid_host(&host) {
        return Err(UriError::BadHost(authority.to_string()));
    }
    let port = match port {
        None | Some("") => 80,
        Some(p) => match p.parse::<u16>() {
            Ok(n) if n > 0 && p.chars().all(|c| c.is_ascii_digit()) => n,
            _ => return Err(UriError::BadPort(authority.to_string())),
        },
    };
    Ok((host, port))
}

/// Resolve a request target against the `Host` header.
///
/// Origin-form (`/path`) takes host and port from `Host`; absolute-form
/// (`http://host/path`) carries its own and wins over `Host`.
pub fn resolve_target(target: &str, host_header: Option<&str>) -> Result<TargetUri, UriError> {
    if target.starts_with('/') {
        let host_header = host_header.filter(|h| !h.trim().is_empty()).ok_or(UriError::MissingHost)?;
        let (host, port) = parse_authority(host_header)?;
        return Ok(TargetUri {
            host,
            port,
            path: target.to_string(),
        });
    }
    let lower = target.get(..7).map(|s| s.to_ascii_lowercase());
    if lower.as_deref() == Some("http://") {
        let rest = &target[7..];
        let split = rest.find(['/', '?', '#']).unwrap_or(rest.len());
        let (authority, tail) = rest.split_at(split);
        let (host, port) = parse_authority(authority)?;
        let tail = tail.split('#').next().unwrap_or("");
        let path = if tail.starts_with('/') {
            tail.to_string()
        } else {
            format!("/{tail}")
        };
        return Ok(TargetUri { host, port, path });
    }
    Err(UriError::UnsupportedTarget(target.to_string()))
}

/// Absolute URI for a request line plus its headers.
pub fn reconstruct_uri(request_line: &str, headers: &Headers) -> Result<String, UriError> {
    let mut raw = request_line.trim_end().as_bytes().to_vec();
    raw.extend_from_slice(b"\r\n\r\n");
    let head = parse_request_head(&raw).map_err(|e| UriError::BadRequestLine(e.to_string()))?;
    Ok(resolve_target(&head.target, headers.get("host"))?.absolute())
}
