//! Squid `external_acl_type` helper protocol.
//!
//! Squid writes one line per lookup (here: the client source address,
//! `%SRC`) and blocks until the helper answers `OK user=<name>` or `ERR`.
//! The loop answers every line, including ones it cannot parse, and
//! flushes after each answer.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;

use percent_encoding::percent_decode_str;
use thiserror::Error;
use tracing::{debug, warn};

use crate::clock::Clock;
use crate::session::{parse_client_ip, AuthDecision, SessionStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelperQuery {
    pub raw_line: String,
    pub ip: Ipv4Addr,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unparseable helper request {line:?}: {source}")]
pub struct HelperParseError {
    pub line: String,
    pub source: StoreError,
}

/// Parse one request line. Surrounding whitespace and %-escapes are
/// removed; tokens after the address are ignored.
pub fn parse_helper_request(line: &str) -> Result<HelperQuery, HelperParseError> {
    let raw_line = line.trim_end_matches(['\r', '\n']).trim().to_string();
    let first = raw_line.split_whitespace().next().unwrap_or("");
    let decoded = percent_decode_str(first).decode_utf8_lossy();
    match parse_client_ip(&decoded) {
        Ok(ip) => Ok(HelperQuery { raw_line, ip }),
        Err(source) => Err(HelperParseError {
            line: raw_line,
            source,
        }),
    }
}

/// One answer line, without the trailing newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelperResponse {
    line: String,
}

impl HelperResponse {
    pub fn as_str(&self) -> &str {
        &self.line
    }

    /// Wire form: the line plus LF.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.line.len() + 1);
        out.extend_from_slice(self.line.as_bytes());
        out.push(b'\n');
        out
    }
}

impl fmt::Display for HelperResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line)
    }
}

pub fn format_helper_response(decision: &AuthDecision) -> HelperResponse {
    let line = match decision {
        // A user name with whitespace would break Squid's key=value parsing.
        AuthDecision::Ok { user } if user.is_empty() || user.chars().any(|c| c.is_whitespace() || c.is_control()) => {
            warn!(user = %user.escape_debug(), "user name unusable in helper reply; answering ERR");
            "ERR".to_string()
        }
        AuthDecision::Ok { user } => format!("OK user={user}"),
        AuthDecision::Err => "ERR".to_string(),
    };
    HelperResponse { line }
}

/// Answer lines from `input` until EOF. Only I/O errors on the streams end
/// the loop early; store failures and bad lines are answered with `ERR`.
pub fn run_helper_loop<R: BufRead, W: Write>(
    mut input: R,
    mut output: W,
    group: &str,
    store: &dyn SessionStore,
    clock: &dyn Clock,
) -> io::Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let decision = match parse_helper_request(&line) {
            Ok(q) => match store.lookup(q.ip, group, clock.now()) {
                Ok(d) => {
                    debug!(ip = %q.ip, ok = d.is_ok(), "lookup");
                    d
                }
                Err(e) => {
                    warn!(ip = %q.ip, error = %e, "store lookup failed; answering ERR");
                    AuthDecision::Err
                }
            },
            Err(e) => {
                warn!("{e}");
                AuthDecision::Err
            }
        };
        output.write_all(&format_helper_response(&decision).to_wire())?;
        output.flush()?;
    }
}
