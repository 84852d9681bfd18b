//! IP-based authentication for intercepting HTTP proxies.
//!
//! Browsers refuse to answer proxy authentication challenges from a proxy
//! they were never configured to use, so an intercepting proxy cannot ask
//! for credentials in-band. This crate moves authentication out of band:
//!
//! * a captive login service ([`auth`]) verifies credentials against a flat
//!   file or an LDAP directory and records the client's IP address in the
//!   [`session`] store for a chosen duration;
//! * the [`acl`] engine judges each request by policy (whitelist or
//!   blacklist) and by whether its source IP holds a live session, caching
//!   the session answer for a TTL;
//! * the intercepting [`proxy`] rebuilds absolute URIs from the `Host`
//!   header, applies the verdict, and either relays the origin response or
//!   serves a deny page linking to the login service;
//! * [`helper`] speaks the Squid `external_acl_type` line protocol so the
//!   same store can back an existing Squid deployment.

pub mod acl;
pub mod auth;
pub mod clock;
pub mod config;
pub mod helper;
pub mod http;
pub mod proxy;
pub mod session;

pub use acl::{match_domain, AclEngine, AclPolicy, PolicyMode, Verdict, VerdictAction};
pub use clock::{Clock, ManualClock, SystemClock, Timestamp};
pub use session::{AuthDecision, MemoryStore, SessionRecord, SessionStore, StoreError};
