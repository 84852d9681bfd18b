//! Credentials file: one `user:password-hash:group1,group2` record per
//! line. Blank lines and lines starting with `#` are ignored. Hashes are
//! Argon2id PHC strings as produced by [`hash_password`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use async_trait::async_trait;
use thiserror::Error;

use super::{BackendError, CredentialBackend, VerifyResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialRecord {
    pub user: String,
    pub password_hash: String,
    pub groups: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CredentialsError {
    #[error("cannot read credentials file {path}: {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate user {user:?}")]
    DuplicateUser { line: usize, user: String },
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control() || c == ':' || c == ',')
}

pub fn parse_credentials(text: &str) -> Result<Vec<CredentialRecord>, CredentialsError> {
    let mut seen = HashMap::new();
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let syntax = |message: &str| CredentialsError::Syntax {
            line,
            message: message.to_string(),
        };
        let (user, rest) = trimmed.split_once(':').ok_or_else(|| syntax("expected user:hash:groups"))?;
        let (hash, groups) = rest.rsplit_once(':').ok_or_else(|| syntax("expected user:hash:groups"))?;
        if !valid_name(user) {
            return Err(syntax("invalid user name"));
        }
        PasswordHash::new(hash).map_err(|e| syntax(&format!("invalid password hash: {e}")))?;
        let groups: Vec<String> = groups.split(',').map(|g| g.trim().to_string()).collect();
        if groups.iter().any(|g| !valid_name(g)) {
            return Err(syntax("invalid group list"));
        }
        if seen.insert(user.to_string(), line).is_some() {
            return Err(CredentialsError::DuplicateUser {
                line,
                user: user.to_string(),
            });
        }
        records.push(CredentialRecord {
            user: user.to_string(),
            password_hash: hash.to_string(),
            groups,
        });
    }
    Ok(records)
}

pub fn load_credentials(path: &Path) -> Result<Vec<CredentialRecord>, CredentialsError> {
    let text = std::fs::read_to_string(path).map_err(|source| CredentialsError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    parse_credentials(&text)
}

/// Salted Argon2id hash in PHC string form.
pub fn hash_password(password: &str) -> String {
    let salt = SaltString::encode_b64(&rand::random::<[u8; 16]>()).expect("16-byte salt encodes");
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .expect("argon2 with default parameters cannot fail")
        .to_string()
}

fn dummy_hash() -> &'static str {
    static DUMMY: OnceLock<String> = OnceLock::new();
    DUMMY.get_or_init(|| hash_password("not a real password"))
}

fn password_matches(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash)
        .map(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
        .unwrap_or(false)
}

/// Check `user`/`password` against `records`. Unknown users still pay for a
/// full hash verification so they take as long as a wrong password.
pub fn flatfile_verify(user: &str, password: &str, records: &[CredentialRecord]) -> VerifyResult {
    match records.iter().find(|r| r.user == user) {
        Some(r) if password_matches(password, &r.password_hash) => VerifyResult::success(r.groups.clone()),
        Some(_) => VerifyResult::failure(),
        None => {
            password_matches(password, dummy_hash());
            VerifyResult::failure()
        }
    }
}

/// [`CredentialBackend`] over a credentials file loaded at startup.
#[derive(Debug, Clone)]
pub struct FlatFileBackend {
    records: Arc<Vec<CredentialRecord>>,
}

impl FlatFileBackend {
    pub fn new(records: Vec<CredentialRecord>) -> Self {
        FlatFileBackend {
            records: Arc::new(records),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CredentialsError> {
        Ok(Self::new(load_credentials(path)?))
    }

    /// Build from plaintext `(user, password, groups)` triples, hashing
    /// each password.
    pub fn from_plaintext<'a>(users: impl IntoIterator<Item = (&'a str, &'a str, &'a [&'a str])>) -> Self {
        Self::new(
            users
                .into_iter()
                .map(|(user, pw, groups)| CredentialRecord {
                    user: user.to_string(),
                    password_hash: hash_password(pw),
                    groups: groups.iter().map(|g| g.to_string()).collect(),
                })
                .collect(),
        )
    }

    pub fn records(&self) -> &[CredentialRecord] {
        &self.records
    }
}

#[async_trait]
impl CredentialBackend for FlatFileBackend {
    async fn verify(&self, user: &str, password: &str) -> Result<VerifyResult, BackendError> {
        let records = self.records.clone();
        let (user, password) = (user.to_string(), password.to_string());
        tokio::task::spawn_blocking(move || flatfile_verify(&user, &password, &records))
            .await
            .map_err(|e| BackendError::Unreachable(format!("verification task failed: {e}")))
    }
}
