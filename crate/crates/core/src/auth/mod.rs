//! Captive login: credential backends, session creation and the HTTP
//! endpoints that serve the login form.

use std::net::Ipv4Addr;
use std::sync::Arc;

use async_trait::async_trait;
use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};

use crate::acl::AuthCache;
use crate::clock::{Clock, Timestamp};
use crate::session::{SessionStore, StoreError};

pub mod ber;
mod flatfile;
mod ldap;
mod web;

pub use flatfile::{
    flatfile_verify, hash_password, load_credentials, parse_credentials, CredentialRecord, CredentialsError,
    FlatFileBackend,
};
pub use ldap::{
    encode_filter, escape_dn_value, escape_filter_value, ldap_verify, GroupSearch, LdapBackend, LdapConfig,
    LdapConfigError,
};
pub use web::{format_duration, AuthServer};

/// Result of a credential check. A failed check never carries groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResult {
    success: bool,
    groups: Vec<String>,
}

impl VerifyResult {
    pub fn success(groups: Vec<String>) -> Self {
        VerifyResult { success: true, groups }
    }

    pub fn failure() -> Self {
        VerifyResult {
            success: false,
            groups: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("credential backend unreachable: {0}")]
    Unreachable(String),
}

/// Somewhere user names and passwords can be checked.
#[async_trait]
pub trait CredentialBackend: Send + Sync {
    /// Must not modify the backend's data.
    async fn verify(&self, user: &str, password: &str) -> Result<VerifyResult, BackendError>;
}

#[derive(Clone, PartialEq, Eq)]
pub struct LoginRequest {
    pub user: String,
    pub password: String,
    pub duration: u64,
    /// Transport source address of the login request.
    pub client_ip: Ipv4Addr,
}

impl std::fmt::Debug for LoginRequest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoginRequest")
            .field("user", &self.user)
            .field("password", &"<redacted>")
            .field("duration", &self.duration)
            .field("client_ip", &self.client_ip)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionStatus {
    pub authenticated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remaining: Option<u64>,
}

impl SessionStatus {
    pub fn anonymous() -> Self {
        SessionStatus {
            authenticated: false,
            user: None,
            remaining: None,
        }
    }

    pub fn active(user: &str, remaining: u64) -> Self {
        SessionStatus {
            authenticated: true,
            user: Some(user.to_string()),
            remaining: Some(remaining),
        }
    }

    /// `key: value` lines, as served by `GET /status`.
    pub fn to_text(&self) -> String {
        let mut out = format!("authenticated: {}\n", self.authenticated);
        if let Some(u) = &self.user {
            out.push_str(&format!("user: {u}\n"));
        }
        if let Some(r) = self.remaining {
            out.push_str(&format!("remaining: {r}\n"));
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoginError {
    #[error("invalid user name or password")]
    BadCredentials,
    #[error("account is not a member of any access group")]
    NoGroups,
    #[error("duration must be a positive number of seconds")]
    InvalidDuration,
    #[error("authentication service unavailable: {0}")]
    Unavailable(String),
}

impl LoginError {
    pub fn status_code(&self) -> u16 {
        match self {
            LoginError::BadCredentials => 401,
            LoginError::NoGroups => 403,
            LoginError::InvalidDuration => 400,
            LoginError::Unavailable(_) => 503,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            LoginError::BadCredentials => "invalid-credentials",
            LoginError::NoGroups => "no-access-groups",
            LoginError::InvalidDuration => "invalid-duration",
            LoginError::Unavailable(_) => "service-unavailable",
        }
    }
}

pub const DEFAULT_MAX_DURATION: u64 = 86_400;
pub const DEFAULT_DURATIONS: [u64; 3] = [3_600, 14_400, 28_800];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSettings {
    pub max_duration: u64,
    /// Choices offered on the login form, in seconds.
    pub durations: Vec<u64>,
}

impl Default for SessionSettings {
    fn default() -> Self {
        SessionSettings {
            max_duration: DEFAULT_MAX_DURATION,
            durations: DEFAULT_DURATIONS.to_vec(),
        }
    }
}

pub struct AuthService {
    backend: Arc<dyn CredentialBackend>,
    store: Arc<dyn SessionStore>,
    clock: Arc<dyn Clock>,
    settings: SessionSettings,
    cache: Option<Arc<AuthCache>>,
}

impl AuthService {
    pub fn new(
        backend: Arc<dyn CredentialBackend>,
        store: Arc<dyn SessionStore>,
        clock: Arc<dyn Clock>,
        settings: SessionSettings,
    ) -> Self {
        AuthService {
            backend,
            store,
            clock,
            settings,
            cache: None,
        }
    }

    /// Drop cached answers for an IP whenever its session changes here, so
    /// an in-process proxy sees logins and logouts at once.
    pub fn with_cache(mut self, cache: Arc<AuthCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn invalidate(&self, ip: Ipv4Addr) {
        if let Some(cache) = &self.cache {
            cache.invalidate(ip);
        }
    }

    /// Verify credentials and, only if they check out, record the client
    /// IP for the requested duration (capped at the maximum).
    pub async fn handle_login(&self, req: &LoginRequest, now: Timestamp) -> Result<SessionStatus, LoginError> {
        if req.duration == 0 {
            return Err(LoginError::InvalidDuration);
        }
        let verdict = self.backend.verify(&req.user, &req.password).await.map_err(|e| {
            warn!(user = %req.user, ip = %req.client_ip, error = %e, "login failed: backend error");
            LoginError::Unavailable(e.to_string())
        })?;
        if !verdict.is_success() {
            info!(user = %req.user, ip = %req.client_ip, "login rejected");
            return Err(LoginError::BadCredentials);
        }
        if verdict.groups().is_empty() {
            return Err(LoginError::NoGroups);
        }
        let duration = req.duration.min(self.settings.max_duration);
        let record = self
            .store
            .insert_session(req.client_ip, &req.user, verdict.groups(), duration, now)
            .map_err(|e| match e {
                StoreError::Unavailable(m) => LoginError::Unavailable(m),
                other => LoginError::Unavailable(other.to_string()),
            })?;
        self.invalidate(req.client_ip);
        info!(user = %req.user, ip = %req.client_ip, duration, "login");
        Ok(SessionStatus::active(&record.user, record.remaining(now)))
    }

    pub fn handle_logout(&self, client_ip: Ipv4Addr) -> Result<SessionStatus, LoginError> {
        let existed = self
            .store
            .logout(client_ip)
            .map_err(|e| LoginError::Unavailable(e.to_string()))?;
        self.invalidate(client_ip);
        if existed {
            info!(ip = %client_ip, "logout");
        }
        Ok(SessionStatus::anonymous())
    }

    pub fn handle_status(&self, client_ip: Ipv4Addr, now: Timestamp) -> Result<SessionStatus, LoginError> {
        match self.store.session(client_ip, now) {
            Ok(Some(r)) => Ok(SessionStatus::active(&r.user, r.remaining(now))),
            Ok(None) => Ok(SessionStatus::anonymous()),
            Err(e) => Err(LoginError::Unavailable(e.to_string())),
        }
    }
}
