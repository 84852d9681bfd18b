//! The single TOML file that drives the `ipgate` binary. See
//! `docs/config.md` for the full grammar.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use url::Url;

use crate::acl::{AclPolicy, PolicyMode, PolicyError};
use crate::auth::{LdapConfig, SessionSettings, DEFAULT_DURATIONS, DEFAULT_MAX_DURATION};
use crate::session::StoreLocator;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen_address")]
    pub listen_address: IpAddr,
    #[serde(default = "default_listen_port")]
    pub listen_port: u16,
    pub login_url: Url,
    #[serde(default = "default_connect_timeout")]
    pub upstream_connect_timeout: u64,
    /// Access log path; absent means stderr via tracing only.
    #[serde(default)]
    pub access_log: Option<PathBuf>,
    pub policy: PolicySection,
    #[serde(default)]
    pub session: SessionSection,
    #[serde(default)]
    pub store: StoreSection,
    pub auth: AuthSection,
    #[serde(default)]
    pub upstream: UpstreamSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub mode: PolicyMode,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default = "default_group")]
    pub auth_group: String,
    #[serde(default = "default_ttl")]
    pub auth_cache_ttl: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    #[serde(default = "default_max_duration")]
    pub max_duration: u64,
    #[serde(default)]
    pub inactivity: Option<u64>,
    #[serde(default = "default_durations")]
    pub durations: Vec<u64>,
}

impl Default for SessionSection {
    fn default() -> Self {
        SessionSection {
            max_duration: DEFAULT_MAX_DURATION,
            inactivity: None,
            durations: DEFAULT_DURATIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    #[serde(default = "default_locator")]
    pub locator: String,
}

impl Default for StoreSection {
    fn default() -> Self {
        StoreSection {
            locator: default_locator(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Flatfile,
    Ldap,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthSection {
    pub listen: SocketAddr,
    pub backend: BackendKind,
    #[serde(default)]
    pub credentials_file: Option<PathBuf>,
    #[serde(default)]
    pub portal_dir: Option<PathBuf>,
    #[serde(default)]
    pub ldap: Option<LdapConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamSection {
    /// `"host:port" = "addr:port"` overrides, mostly for testing.
    #[serde(default)]
    pub routes: BTreeMap<String, SocketAddr>,
}

fn default_listen_address() -> IpAddr {
    IpAddr::V4(Ipv4Addr::UNSPECIFIED)
}
fn default_listen_port() -> u16 {
    crate::proxy::DEFAULT_LISTEN_PORT
}
fn default_connect_timeout() -> u64 {
    10
}
fn default_group() -> String {
    "internet".into()
}
fn default_ttl() -> u64 {
    300
}
fn default_max_duration() -> u64 {
    DEFAULT_MAX_DURATION
}
fn default_durations() -> Vec<u64> {
    DEFAULT_DURATIONS.to_vec()
}
fn default_locator() -> String {
    "memory:".into()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.listen_port == 0 {
            return Err(invalid("listen_port", "must be 1-65535"));
        }
        if !matches!(self.login_url.scheme(), "http" | "https") || self.login_url.host_str().is_none() {
            return Err(invalid("login_url", "must be an absolute http(s) URL"));
        }
        if self.upstream_connect_timeout == 0 {
            return Err(invalid("upstream_connect_timeout", "must be positive"));
        }
        self.acl_policy()?;
        if self.session.max_duration == 0 {
            return Err(invalid("session.max_duration", "must be positive"));
        }
        if self.session.inactivity == Some(0) {
            return Err(invalid("session.inactivity", "must be positive when set"));
        }
        if self.session.durations.is_empty() || self.session.durations.contains(&0) {
            return Err(invalid("session.durations", "need at least one positive duration"));
        }
        self.store_locator()?;
        match self.auth.backend {
            BackendKind::Flatfile if self.auth.credentials_file.is_none() => {
                return Err(invalid("auth.credentials_file", "required for the flatfile backend"));
            }
            BackendKind::Ldap => match &self.auth.ldap {
                None => return Err(invalid("auth.ldap", "required for the ldap backend")),
                Some(l) => l.validate().map_err(|e| invalid("auth.ldap", e.to_string()))?,
            },
            _ => {}
        }
        Ok(())
    }

    pub fn acl_policy(&self) -> Result<AclPolicy, ConfigError> {
        let p = &self.policy;
        Ok(AclPolicy::new(p.mode, &p.domains, &p.auth_group)?.with_ttl(p.auth_cache_ttl))
    }

    pub fn store_locator(&self) -> Result<StoreLocator, ConfigError> {
        self.store.locator.parse().map_err(|e: String| invalid("store.locator", e))
    }

    pub fn session_settings(&self) -> SessionSettings {
        SessionSettings {
            max_duration: self.session.max_duration,
            durations: self.session.durations.clone(),
        }
    }

    pub fn listen_addr(&self) -> SocketAddr {
        SocketAddr::new(self.listen_address, self.listen_port)
    }
}
