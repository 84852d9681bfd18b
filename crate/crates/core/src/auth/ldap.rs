//! LDAPv3 simple-bind credential check with optional group lookup.
//!
//! The user's DN comes from a template; a successful bind with the supplied
//! password proves the credentials. Groups are then read with a search run
//! under the user's own bind, or taken from a configured default.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tracing::{debug, warn};
use url::Url;

use super::ber::{self, application, constructed, context, integer, octets, BerError, Tlv};
use super::{BackendError, CredentialBackend, VerifyResult};

const MAX_MESSAGE: usize = 1 << 20;

fn default_filter() -> String {
    "(&(objectClass=groupOfNames)(member={dn}))".into()
}

fn default_attribute() -> String {
    "cn".into()
}

fn default_groups() -> Vec<String> {
    vec!["internet".into()]
}

fn default_timeout() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSearch {
    pub base_dn: String,
    /// `{dn}` is replaced by the user's DN and `{user}` by the login name,
    /// both filter-escaped.
    #[serde(default = "default_filter")]
    pub filter: String,
    /// Attribute whose values name the groups.
    #[serde(default = "default_attribute")]
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdapConfig {
    /// `ldap://host[:port]`
    pub url: String,
    /// e.g. `uid={user},ou=people,dc=example,dc=org`
    pub user_dn_template: String,
    #[serde(default)]
    pub group_search: Option<GroupSearch>,
    /// Groups granted when no group search is configured.
    #[serde(default = "default_groups")]
    pub default_groups: Vec<String>,
    /// Seconds allowed for the whole exchange.
    #[serde(default = "default_timeout")]
    pub timeout: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LdapConfigError {
    #[error("invalid LDAP url {0:?}: only ldap://host[:port] is supported")]
    BadUrl(String),
    #[error("user_dn_template must contain {{user}}")]
    NoUserPlaceholder,
    #[error("invalid group filter: {0}")]
    BadFilter(String),
    #[error("default_groups must not be empty when no group search is configured")]
    NoDefaultGroups,
}

impl LdapConfig {
    pub fn validate(&self) -> Result<(), LdapConfigError> {
        self.address()?;
        if !self.user_dn_template.contains("{user}") {
            return Err(LdapConfigError::NoUserPlaceholder);
        }
        match &self.group_search {
            Some(gs) => {
                let probe = gs.filter.replace("{dn}", "x").replace("{user}", "x");
                encode_filter(&probe).map_err(|e| LdapConfigError::BadFilter(e.to_string()))?;
            }
            None if self.default_groups.is_empty() => return Err(LdapConfigError::NoDefaultGroups),
            None => {}
        }
        Ok(())
    }

    fn address(&self) -> Result<(String, u16), LdapConfigError> {
        let bad = || LdapConfigError::BadUrl(self.url.clone());
        let url = Url::parse(&self.url).map_err(|_| bad())?;
        if url.scheme() != "ldap" {
            return Err(bad());
        }
        let host = url.host_str().ok_or_else(bad)?.to_string();
        Ok((host, url.port().unwrap_or(389)))
    }

    pub fn user_dn(&self, user: &str) -> String {
        self.user_dn_template.replace("{user}", &escape_dn_value(user))
    }
}

/// Escape a value for use inside a DN attribute value.
pub fn escape_dn_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let last = v.chars().count().saturating_sub(1);
    for (i, c) in v.chars().enumerate() {
        match c {
            ',' | '+' | '"' | '\\' | '<' | '>' | ';' | '=' => {
                out.push('\\');
                out.push(c);
            }
            '#' if i == 0 => out.push_str("\\#"),
            ' ' if i == 0 || i == last => out.push_str("\\ "),
            '\0' => out.push_str("\\00"),
            c => out.push(c),
        }
    }
    out
}

/// Escape a value for use inside a search filter.
pub fn escape_filter_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '*' => out.push_str("\\2a"),
            '(' => out.push_str("\\28"),
            ')' => out.push_str("\\29"),
            '\\' => out.push_str("\\5c"),
            '\0' => out.push_str("\\00"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("unexpected end of filter")]
    Eof,
    #[error("unexpected {0:?} at offset {1}")]
    Unexpected(char, usize),
    #[error("bad escape in filter value")]
    BadEscape,
    #[error("trailing characters after filter")]
    Trailing,
}

/// Encode a filter string: `&`, `|`, `!`, equality, presence and
/// substring items.
pub fn encode_filter(s: &str) -> Result<Vec<u8>, FilterError> {
    let bytes = s.trim().as_bytes();
    let (enc, used) = parse_filter(bytes, 0)?;
    if used != bytes.len() {
        return Err(FilterError::Trailing);
    }
    Ok(enc)
}

fn parse_filter(s: &[u8], at: usize) -> Result<(Vec<u8>, usize), FilterError> {
    let peek = |i: usize| s.get(i).copied().ok_or(FilterError::Eof);
    if peek(at)? != b'(' {
        return Err(FilterError::Unexpected(peek(at)? as char, at));
    }
    let mut i = at + 1;
    let enc = match peek(i)? {
        op @ (b'&' | b'|') => {
            i += 1;
            let mut parts = Vec::new();
            while peek(i)? == b'(' {
                let (p, next) = parse_filter(s, i)?;
                parts.push(p);
                i = next;
            }
            constructed(context(if op == b'&' { 0 } else { 1 }, true), &parts)
        }
        b'!' => {
            let (p, next) = parse_filter(s, i + 1)?;
            i = next;
            constructed(context(2, true), &[p])
        }
        _ => {
            let start = i;
            while peek(i)? != b'=' {
                if matches!(peek(i)?, b'(' | b')') {
                    return Err(FilterError::Unexpected(peek(i)? as char, i));
                }
                i += 1;
            }
            let attr = &s[start..i];
            if attr.is_empty() {
                return Err(FilterError::Unexpected('=', i));
            }
            i += 1;
            let vstart = i;
            while peek(i)? != b')' {
                if peek(i)? == b'(' {
                    return Err(FilterError::Unexpected('(', i));
                }
                i += 1;
            }
            item(attr, &s[vstart..i])?
        }
    };
    if peek(i)? != b')' {
        return Err(FilterError::Unexpected(peek(i)? as char, i));
    }
    Ok((enc, i + 1))
}

fn unescape(v: &[u8]) -> Result<Vec<u8>, FilterError> {
    let mut out = Vec::with_capacity(v.len());
    let mut i = 0;
    while i < v.len() {
        if v[i] == b'\\' {
            let hex = v.get(i + 1..i + 3).ok_or(FilterError::BadEscape)?;
            let hex = std::str::from_utf8(hex).map_err(|_| FilterError::BadEscape)?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| FilterError::BadEscape)?);
            i += 3;
        } else {
            out.push(v[i]);
            i += 1;
        }
    }
    Ok(out)
}

fn item(attr: &[u8], value: &[u8]) -> Result<Vec<u8>, FilterError> {
    if value == b"*" {
        return Ok(octets(context(7, false), attr));
    }
    if !value.contains(&b'*') {
        return Ok(constructed(
            context(3, true),
            &[octets(ber::OCTET_STRING, attr), octets(ber::OCTET_STRING, &unescape(value)?)],
        ));
    }
    let pieces: Vec<&[u8]> = value.split(|&b| b == b'*').collect();
    let last = pieces.len() - 1;
    let mut subs = Vec::new();
    for (n, p) in pieces.iter().enumerate() {
        if p.is_empty() {
            continue;
        }
        let tag = if n == 0 {
            0
        } else if n == last {
            2
        } else {
            1
        };
        subs.push(octets(context(tag, false), &unescape(p)?));
    }
    Ok(constructed(
        context(4, true),
        &[octets(ber::OCTET_STRING, attr), constructed(ber::SEQUENCE, &subs)],
    ))
}

#[derive(Debug, Error)]
enum LdapError {
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Ber(#[from] BerError),
    #[error("protocol: {0}")]
    Protocol(String),
}

struct Connection {
    stream: TcpStream,
    buf: Vec<u8>,
    next_id: i64,
}

/// Code and diagnostic message of an LDAPResult.
struct LdapResult {
    code: i64,
    message: String,
}

fn parse_result(op: Tlv<'_>) -> Result<LdapResult, LdapError> {
    let mut kids = op.children();
    let code = kids.next_tlv()?.expect(ber::ENUMERATED)?.as_i64()?;
    let _matched = kids.next_tlv()?;
    let message = kids
        .next_tlv()
        .map(|t| String::from_utf8_lossy(t.content).into_owned())
        .unwrap_or_default();
    Ok(LdapResult { code, message })
}

impl Connection {
    async fn open(host: &str, port: u16) -> Result<Self, LdapError> {
        let stream = TcpStream::connect((host, port)).await?;
        stream.set_nodelay(true)?;
        Ok(Connection {
            stream,
            buf: Vec::new(),
            next_id: 1,
        })
    }

    async fn send(&mut self, op: Vec<u8>) -> Result<i64, LdapError> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = constructed(ber::SEQUENCE, &[integer(ber::INTEGER, id), op]);
        self.stream.write_all(&msg).await?;
        Ok(id)
    }

    /// Next complete LDAPMessage as raw bytes.
    async fn recv(&mut self) -> Result<Vec<u8>, LdapError> {
        loop {
            if let Some((hdr, len)) = ber::peek_lengths(&self.buf)? {
                if hdr + len > MAX_MESSAGE {
                    return Err(LdapError::Protocol("message too large".into()));
                }
                if self.buf.len() >= hdr + len {
                    let rest = self.buf.split_off(hdr + len);
                    return Ok(std::mem::replace(&mut self.buf, rest));
                }
            }
            let mut chunk = [0u8; 4096];
            let n = self.stream.read(&mut chunk).await?;
            if n == 0 {
                return Err(LdapError::Protocol("server closed the connection".into()));
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    async fn bind(&mut self, dn: &str, password: &str) -> Result<LdapResult, LdapError> {
        let op = constructed(
            application(0, true),
            &[
                integer(ber::INTEGER, 3),
                octets(ber::OCTET_STRING, dn.as_bytes()),
                octets(context(0, false), password.as_bytes()),
            ],
        );
        let id = self.send(op).await?;
        let raw = self.recv().await?;
        let (msg, _) = ber::parse(&raw)?;
        let mut kids = msg.expect(ber::SEQUENCE)?.children();
        if kids.next_tlv()?.as_i64()? != id {
            return Err(LdapError::Protocol("unexpected message id".into()));
        }
        parse_result(kids.next_tlv()?.expect(application(1, true))?)
    }

    async fn search(&mut self, base: &str, filter: &[u8], attribute: &str) -> Result<Vec<String>, LdapError> {
        let op = constructed(
            application(3, true),
            &[
                octets(ber::OCTET_STRING, base.as_bytes()),
                integer(ber::ENUMERATED, 2), // wholeSubtree
                integer(ber::ENUMERATED, 0), // neverDerefAliases
                integer(ber::INTEGER, 0),
                integer(ber::INTEGER, 0),
                octets(ber::BOOLEAN, &[0]),
                filter.to_vec(),
                constructed(ber::SEQUENCE, &[octets(ber::OCTET_STRING, attribute.as_bytes())]),
            ],
        );
        let id = self.send(op).await?;
        let mut values = Vec::new();
        loop {
            let raw = self.recv().await?;
            let (msg, _) = ber::parse(&raw)?;
            let mut kids = msg.expect(ber::SEQUENCE)?.children();
            if kids.next_tlv()?.as_i64()? != id {
                return Err(LdapError::Protocol("unexpected message id".into()));
            }
            let op = kids.next_tlv()?;
            match op.tag {
                t if t == application(4, true) => {
                    let mut entry = op.children();
                    let _dn = entry.next_tlv()?;
                    for attr in entry.next_tlv()?.expect(ber::SEQUENCE)?.children() {
                        let mut parts = attr?.expect(ber::SEQUENCE)?.children();
                        let name = parts.next_tlv()?;
                        if !name.content.eq_ignore_ascii_case(attribute.as_bytes()) {
                            continue;
                        }
                        for v in parts.next_tlv()?.children() {
                            values.push(String::from_utf8_lossy(v?.content).into_owned());
                        }
                    }
                }
                t if t == application(19, true) => {} // referral
                t if t == application(5, true) => {
                    let result = parse_result(op)?;
                    if result.code != 0 {
                        return Err(LdapError::Protocol(format!(
                            "group search failed with code {}: {}",
                            result.code, result.message
                        )));
                    }
                    return Ok(values);
                }
                t => return Err(LdapError::Protocol(format!("unexpected operation {t:#04x}"))),
            }
        }
    }

    async fn unbind(mut self) {
        let _ = self.send(vec![application(2, false), 0]).await;
        let _ = self.stream.shutdown().await;
    }
}

// invalidCredentials, noSuchObject, inappropriateAuthentication,
// insufficientAccessRights, invalidDNSyntax
const REJECTED: &[i64] = &[49, 32, 48, 50, 34];

/// Bind as the user and, on success, collect their groups.
pub async fn ldap_verify(user: &str, password: &str, config: &LdapConfig) -> Result<VerifyResult, BackendError> {
    // An empty password would be an unauthenticated bind, which servers
    // accept without checking anything.
    if user.is_empty() || password.is_empty() {
        return Ok(VerifyResult::failure());
    }
    let (host, port) = config
        .address()
        .map_err(|e| BackendError::Unreachable(e.to_string()))?;
    let limit = Duration::from_secs(config.timeout.max(1));
    match timeout(limit, verify_inner(user, password, config, &host, port)).await {
        Ok(r) => r,
        Err(_) => Err(BackendError::Unreachable(format!("LDAP server {host}:{port} timed out"))),
    }
}

async fn verify_inner(
    user: &str,
    password: &str,
    config: &LdapConfig,
    host: &str,
    port: u16,
) -> Result<VerifyResult, BackendError> {
    let unreachable = |e: LdapError| BackendError::Unreachable(format!("LDAP {host}:{port}: {e}"));
    let mut conn = Connection::open(host, port).await.map_err(unreachable)?;
    let dn = config.user_dn(user);
    let result = conn.bind(&dn, password).await.map_err(unreachable)?;
    if result.code != 0 {
        conn.unbind().await;
        if REJECTED.contains(&result.code) {
            debug!(%dn, code = result.code, "LDAP bind rejected");
            return Ok(VerifyResult::failure());
        }
        return Err(BackendError::Unreachable(format!(
            "LDAP bind returned code {}: {}",
            result.code, result.message
        )));
    }
    let groups = match &config.group_search {
        Some(gs) => {
            let filter = gs
                .filter
                .replace("{dn}", &escape_filter_value(&dn))
                .replace("{user}", &escape_filter_value(user));
            let filter = encode_filter(&filter).map_err(|e| BackendError::Unreachable(e.to_string()))?;
            let groups = conn.search(&gs.base_dn, &filter, &gs.attribute).await.map_err(unreachable)?;
            if groups.is_empty() {
                warn!(%dn, "LDAP user authenticated but belongs to no groups");
            }
            groups
        }
        None => config.default_groups.clone(),
    };
    conn.unbind().await;
    Ok(VerifyResult::success(groups))
}

/// [`CredentialBackend`] over an LDAP directory.
#[derive(Debug, Clone)]
pub struct LdapBackend {
    config: LdapConfig,
}

impl LdapBackend {
    pub fn new(config: LdapConfig) -> Result<Self, LdapConfigError> {
        config.validate()?;
        Ok(LdapBackend { config })
    }
}

#[async_trait]
impl CredentialBackend for LdapBackend {
    async fn verify(&self, user: &str, password: &str) -> Result<VerifyResult, BackendError> {
        ldap_verify(user, password, &self.config).await
    }
}
