//! Request policy: whitelist or blacklist domains combined with the
//! per-IP login check, plus the TTL cache in front of the session store.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::clock::Timestamp;
use crate::proxy::HttpRequestSummary;
use crate::session::{AuthDecision, SessionStore};

pub const DEFAULT_AUTH_CACHE_TTL: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Default deny. Listed domains pass for everyone; anything else needs
    /// a login.
    Whitelist,
    /// Default allow. Listed domains are blocked unless the client is
    /// logged in.
    Blacklist,
}

impl FromStr for PolicyMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "whitelist" => Ok(PolicyMode::Whitelist),
            "blacklist" => Ok(PolicyMode::Blacklist),
            _ => Err(PolicyError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyMode::Whitelist => "whitelist",
            PolicyMode::Blacklist => "blacklist",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("unknown policy mode {0:?} (expected whitelist or blacklist)")]
    UnknownMode(String),
    #[error("invalid domain pattern {0:?}: expected a bare host name such as example.com or .example.com")]
    BadPattern(String),
    #[error("auth group must be non-empty")]
    EmptyGroup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclPolicy {
    pub mode: PolicyMode,
    domains: BTreeSet<String>,
    pub auth_group: String,
    /// Seconds a session answer stays cached. Zero disables the cache.
    pub auth_cache_ttl: u64,
}

impl AclPolicy {
    pub fn new<I, S>(mode: PolicyMode, domains: I, auth_group: &str) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if auth_group.trim().is_empty() {
            return Err(PolicyError::EmptyGroup);
        }
        let domains = domains
            .into_iter()
            .map(|d| normalize_pattern(d.as_ref()))
            .collect::<Result<_, _>>()?;
        Ok(AclPolicy {
            mode,
            domains,
            auth_group: auth_group.to_string(),
            auth_cache_ttl: DEFAULT_AUTH_CACHE_TTL,
        })
    }

    pub fn with_ttl(mut self, ttl: u64) -> Self {
        self.auth_cache_ttl = ttl;
        self
    }

    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    pub fn lists(&self, host: &str) -> bool {
        match_domain(host, &self.domains)
    }
}

fn normalize_pattern(raw: &str) -> Result<String, PolicyError> {
    let p = raw.trim().trim_end_matches('.').to_ascii_lowercase();
    let body = p.strip_prefix('.').unwrap_or(&p);
    let ok = !body.is_empty()
        && !body.starts_with('.')
        && !body.contains("..")
        && body
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_');
    if ok {
        Ok(p)
    } else {
        Err(PolicyError::BadPattern(raw.to_string()))
    }
}

/// `host` matches `example.com` only exactly; it matches `.example.com`
/// when it is `example.com` or ends in `.example.com`.
pub fn match_domain<'a, I>(host: &str, patterns: I) -> bool
where
    I: IntoIterator<Item = &'a String>,
{
    let host = host.trim_end_matches('.');
    patterns.into_iter().any(|p| match p.strip_prefix('.') {
        Some(base) => {
            host == base
                || (host.len() > base.len()
                    && host.ends_with(base)
                    && host.as_bytes()[host.len() - base.len() - 1] == b'.')
        }
        None => host == p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictAction {
    Allow,
    DenyNeedsLogin,
    DenyBlacklisted,
}

impl VerdictAction {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictAction::Allow => "allow",
            VerdictAction::DenyNeedsLogin => "deny-needs-login",
            VerdictAction::DenyBlacklisted => "deny-blacklisted",
        }
    }
}

impl fmt::Display for VerdictAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allow" => Ok(VerdictAction::Allow),
            "deny-needs-login" => Ok(VerdictAction::DenyNeedsLogin),
            "deny-blacklisted" => Ok(VerdictAction::DenyBlacklisted),
            _ => Err(format!("unknown verdict {s:?}")),
        }
    }
}

/// Decision for one request. `user` is set only when the request was let
/// through because of a login.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    action: VerdictAction,
    user: Option<String>,
}

impl Verdict {
    pub fn allow() -> Self {
        Verdict {
            action: VerdictAction::Allow,
            user: None,
        }
    }

    pub fn allow_user(user: impl Into<String>) -> Self {
        Verdict {
            action: VerdictAction::Allow,
            user: Some(user.into()),
        }
    }

    pub fn deny_needs_login() -> Self {
        Verdict {
            action: VerdictAction::DenyNeedsLogin,
            user: None,
        }
    }

    pub fn deny_blacklisted() -> Self {
        Verdict {
            action: VerdictAction::DenyBlacklisted,
            user: None,
        }
    }

    pub fn action(&self) -> VerdictAction {
        self.action
    }

    pub fn user(&self) -> Option<&str> {
        self.user.as_deref()
    }

    pub fn is_allow(&self) -> bool {
        self.action == VerdictAction::Allow
    }
}

/// The rule tables.
///
/// Whitelist: listed → allow; logged in → allow as user; else needs login.
/// Blacklist: logged in → allow as user; listed → blocked; else allow.
pub fn decide(mode: PolicyMode, listed: bool, auth: &AuthDecision) -> Verdict {
    match (mode, auth) {
        (PolicyMode::Whitelist, _) if listed => Verdict::allow(),
        (PolicyMode::Whitelist, AuthDecision::Ok { user }) => Verdict::allow_user(user.as_str()),
        (PolicyMode::Whitelist, AuthDecision::Err) => Verdict::deny_needs_login(),
        (PolicyMode::Blacklist, AuthDecision::Ok { user }) => Verdict::allow_user(user.as_str()),
        (PolicyMode::Blacklist, AuthDecision::Err) if listed => Verdict::deny_blacklisted(),
        (PolicyMode::Blacklist, AuthDecision::Err) => Verdict::allow(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub ip: Ipv4Addr,
    pub decision: AuthDecision,
    pub cached_at: Timestamp,
}

impl CacheEntry {
    fn fresh(&self, now: Timestamp, ttl: u64) -> bool {
        ttl > 0 && now >= self.cached_at && now - self.cached_at <= ttl
    }
}

/// Per-IP cache of session answers. Both Ok and Err answers are kept.
#[derive(Debug, Default)]
pub struct AuthCache {
    entries: Mutex<HashMap<Ipv4Addr, CacheEntry>>,
}

impl AuthCache {
    pub fn get(&self, ip: Ipv4Addr, now: Timestamp, ttl: u64) -> Option<AuthDecision> {
        let entries = self.entries.lock();
        entries
            .get(&ip)
            .filter(|e| e.fresh(now, ttl))
            .map(|e| e.decision.clone())
    }

    pub fn put(&self, ip: Ipv4Addr, decision: AuthDecision, now: Timestamp) {
        self.entries.lock().insert(
            ip,
            CacheEntry {
                ip,
                decision,
                cached_at: now,
            },
        );
    }

    pub fn invalidate(&self, ip: Ipv4Addr) {
        self.entries.lock().remove(&ip);
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Policy evaluation bound to one store.
pub struct AclEngine {
    policy: AclPolicy,
    store: Arc<dyn SessionStore>,
    cache: Arc<AuthCache>,
}

impl AclEngine {
    pub fn new(policy: AclPolicy, store: Arc<dyn SessionStore>) -> Self {
        AclEngine {
            policy,
            store,
            cache: Arc::new(AuthCache::default()),
        }
    }

    pub fn policy(&self) -> &AclPolicy {
        &self.policy
    }

    pub fn store(&self) -> &Arc<dyn SessionStore> {
        &self.store
    }

    pub fn cache(&self) -> &Arc<AuthCache> {
        &self.cache
    }

    /// Session answer for `ip` in the policy's group, from cache while
    /// fresh. A failing store yields `Err` and is not cached.
    pub fn cached_auth_check(&self, ip: Ipv4Addr, now: Timestamp) -> AuthDecision {
        let ttl = self.policy.auth_cache_ttl;
        if let Some(hit) = self.cache.get(ip, now, ttl) {
            return hit;
        }
        match self.store.lookup(ip, &self.policy.auth_group, now) {
            Ok(decision) => {
                if ttl > 0 {
                    self.cache.put(ip, decision.clone(), now);
                }
                decision
            }
            Err(e) => {
                warn!(%ip, error = %e, "session lookup failed; denying");
                AuthDecision::Err
            }
        }
    }

    pub fn evaluate(&self, request: &HttpRequestSummary, now: Timestamp) -> Verdict {
        let listed = self.policy.lists(&request.host);
        match self.policy.mode {
            // approved sites never touch the store
            PolicyMode::Whitelist if listed => Verdict::allow(),
            mode => decide(mode, listed, &self.cached_auth_check(request.client_ip, now)),
        }
    }
}
