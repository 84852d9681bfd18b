//! Authenticated client IPs and the groups their users belong to.
//!
//! The store has two tables. `addresses` holds one row per logged-in client
//! IP with the owning user and an absolute expiry time; `groups` holds
//! `(user, group)` pairs. Every query first deletes expired addresses and
//! then any group rows whose user no longer owns an address, and only then
//! answers. A client is authorised for a group when its IP has a live row
//! and that row's user is a member of the group.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Timestamp;

mod memory;
#[cfg(feature = "sqlite")]
mod sqlite;

pub use memory::MemoryStore;
#[cfg(feature = "sqlite")]
pub use sqlite::SqliteStore;

/// One authenticated client IP (a row of `addresses`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub ip: Ipv4Addr,
    pub user: String,
    pub end_time: Timestamp,
    /// Time of the last successful lookup; only consulted when an
    /// inactivity window is configured.
    pub last_activity: Timestamp,
}

impl SessionRecord {
    pub fn remaining(&self, now: Timestamp) -> u64 {
        self.end_time.saturating_sub(now)
    }
}

/// A row of `groups`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupMembership {
    pub user: String,
    pub group: String,
}

impl GroupMembership {
    pub fn new(user: impl Into<String>, group: impl Into<String>) -> Self {
        GroupMembership {
            user: user.into(),
            group: group.into(),
        }
    }
}

/// Answer to "is this IP logged in for this group".
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthDecision {
    Ok { user: String },
    Err,
}

impl AuthDecision {
    pub fn ok(user: impl Into<String>) -> Self {
        AuthDecision::Ok { user: user.into() }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, AuthDecision::Ok { .. })
    }

    pub fn user(&self) -> Option<&str> {
        match self {
            AuthDecision::Ok { user } => Some(user),
            AuthDecision::Err => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("invalid IPv4 address {0:?}")]
    InvalidIp(String),
    #[error("IPv6 address {0} is not supported; sessions are keyed by IPv4 source address")]
    Ipv6Unsupported(String),
    #[error("session duration must be positive")]
    InvalidDuration,
    #[error("user name must be non-empty")]
    EmptyUser,
    #[error("a session needs at least one group")]
    NoGroups,
    #[error("session store unavailable: {0}")]
    Unavailable(String),
}

/// Parse a client address, rejecting IPv6 with a dedicated error.
pub fn parse_client_ip(s: &str) -> Result<Ipv4Addr, StoreError> {
    match IpAddr::from_str(s.trim()) {
        Ok(IpAddr::V4(ip)) => Ok(ip),
        Ok(IpAddr::V6(ip)) => match ip.to_ipv4_mapped() {
            Some(v4) => Ok(v4),
            None => Err(StoreError::Ipv6Unsupported(ip.to_string())),
        },
        Err(_) => Err(StoreError::InvalidIp(s.to_string())),
    }
}

/// Shared operations of every store backend.
///
/// Implementations must be safe to call from many threads, and `lookup`
/// must purge and select atomically with respect to other calls.
pub trait SessionStore: Send + Sync {
    /// Log `user` in from `ip` until `now + duration`, replacing any session
    /// already held by `ip`. The user's group set becomes exactly `groups`.
    fn insert_session(
        &self,
        ip: Ipv4Addr,
        user: &str,
        groups: &[String],
        duration: u64,
        now: Timestamp,
    ) -> Result<SessionRecord, StoreError>;

    /// Delete sessions with `end_time < now` (and idle ones when an
    /// inactivity window is set), then orphaned group rows. Returns the
    /// number of sessions removed.
    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError>;

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError>;

    /// Remove the session for `ip`. Returns whether one existed.
    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError>;

    /// Live session for `ip` after purging, if any.
    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError>;
}

impl<S: SessionStore + ?Sized> SessionStore for Arc<S> {
    fn insert_session(
        &self,
        ip: Ipv4Addr,
        user: &str,
        groups: &[String],
        duration: u64,
        now: Timestamp,
    ) -> Result<SessionRecord, StoreError> {
        (**self).insert_session(ip, user, groups, duration, now)
    }

    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError> {
        (**self).purge_expired(now)
    }

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError> {
        (**self).lookup(ip, group, now)
    }

    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError> {
        (**self).logout(ip)
    }

    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError> {
        (**self).session(ip, now)
    }
}

pub(crate) fn validate_insert(user: &str, groups: &[String], duration: u64) -> Result<(), StoreError> {
    if duration == 0 {
        return Err(StoreError::InvalidDuration);
    }
    if user.trim().is_empty() {
        return Err(StoreError::EmptyUser);
    }
    if groups.is_empty() || groups.iter().any(|g| g.trim().is_empty()) {
        return Err(StoreError::NoGroups);
    }
    Ok(())
}

/// Where a store lives: `memory:` or `sqlite:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreLocator {
    Memory,
    Sqlite(PathBuf),
}

impl FromStr for StoreLocator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "memory:" || s == "memory" {
            Ok(StoreLocator::Memory)
        } else if let Some(path) = s.strip_prefix("sqlite:") {
            if path.is_empty() {
                return Err("sqlite locator needs a path, e.g. sqlite:/var/lib/ipgate/sessions.db".into());
            }
            Ok(StoreLocator::Sqlite(PathBuf::from(path)))
        } else {
            Err(format!("unknown store locator {s:?} (expected memory: or sqlite:<path>)"))
        }
    }
}

impl fmt::Display for StoreLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreLocator::Memory => f.write_str("memory:"),
            StoreLocator::Sqlite(p) => write!(f, "sqlite:{}", p.display()),
        }
    }
}

/// Open the store named by `locator`.
pub fn open_store(
    locator: &StoreLocator,
    inactivity: Option<u64>,
) -> Result<Arc<dyn SessionStore>, StoreError> {
    match locator {
        StoreLocator::Memory => Ok(Arc::new(MemoryStore::new().with_inactivity(inactivity))),
        #[cfg(feature = "sqlite")]
        StoreLocator::Sqlite(path) => Ok(Arc::new(SqliteStore::open(path)?.with_inactivity(inactivity))),
        #[cfg(not(feature = "sqlite"))]
        StoreLocator::Sqlite(_) => Err(StoreError::Unavailable(
            "built without the sqlite feature".into(),
        )),
    }
}

/// Opens its backend on first use and again after any failure, so a
/// long-running helper survives a store that is down at startup.
pub struct ReconnectingStore {
    locator: StoreLocator,
    inactivity: Option<u64>,
    inner: Mutex<Option<Arc<dyn SessionStore>>>,
}

impl ReconnectingStore {
    pub fn new(locator: StoreLocator, inactivity: Option<u64>) -> Self {
        ReconnectingStore {
            locator,
            inactivity,
            inner: Mutex::new(None),
        }
    }

    fn with<T>(&self, f: impl FnOnce(&dyn SessionStore) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let store = {
            let mut inner = self.inner.lock();
            match &*inner {
                Some(s) => s.clone(),
                None => {
                    let s = open_store(&self.locator, self.inactivity)?;
                    *inner = Some(s.clone());
                    s
                }
            }
        };
        let result = f(&*store);
        if let Err(StoreError::Unavailable(_)) = &result {
            *self.inner.lock() = None;
        }
        result
    }
}

impl SessionStore for ReconnectingStore {
    fn insert_session(
        &self,
        ip: Ipv4Addr,
        user: &str,
        groups: &[String],
        duration: u64,
        now: Timestamp,
    ) -> Result<SessionRecord, StoreError> {
        self.with(|s| s.insert_session(ip, user, groups, duration, now))
    }

    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError> {
        self.with(|s| s.purge_expired(now))
    }

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError> {
        self.with(|s| s.lookup(ip, group, now))
    }

    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError> {
        self.with(|s| s.logout(ip))
    }

    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError> {
        self.with(|s| s.session(ip, now))
    }
}
