//! Python bindings: the session store, the ACL engine and the pure helpers
//! (domain matching, verdict table, helper line protocol, URI rebuilding,
//! credential hashing). Times are plain integer seconds supplied by the
//! caller, so Python code drives the clock.

use std::io::Cursor;
use std::net::Ipv4Addr;
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use ipgate::auth::{flatfile_verify, parse_credentials};
use ipgate::helper::{format_helper_response, parse_helper_request, run_helper_loop};
use ipgate::http::Headers;
use ipgate::proxy::HttpRequestSummary;
use ipgate::session::{open_store, parse_client_ip, StoreLocator};
use ipgate::{AclPolicy, AuthDecision, ManualClock, PolicyMode, StoreError, Timestamp, Verdict};

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Unavailable(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ip(s: &str) -> PyResult<Ipv4Addr> {
    parse_client_ip(s).map_err(store_err)
}

fn decision(user: Option<String>) -> AuthDecision {
    match user {
        Some(u) => AuthDecision::Ok { user: u },
        None => AuthDecision::Err,
    }
}

fn verdict_tuple(v: &Verdict) -> (&'static str, Option<String>) {
    (v.action().as_str(), v.user().map(str::to_string))
}

/// Session store. `locator` is `memory:` or `sqlite:<path>`.
#[pyclass(name = "SessionStore", module = "ipgate", frozen)]
struct PySessionStore {
    inner: Arc<dyn ipgate::SessionStore>,
    locator: String,
}

#[pymethods]
impl PySessionStore {
    #[new]
    #[pyo3(signature = (locator = "memory:", inactivity = None))]
    fn new(locator: &str, inactivity: Option<u64>) -> PyResult<Self> {
        let parsed: StoreLocator = locator.parse().map_err(value_err)?;
        Ok(PySessionStore {
            inner: open_store(&parsed, inactivity).map_err(store_err)?,
            locator: parsed.to_string(),
        })
    }

    /// Returns the new session's end time.
    fn insert_session(&self, ip_addr: &str, user: &str, groups: Vec<String>, duration: u64, now: Timestamp) -> PyResult<Timestamp> {
        let rec = self
            .inner
            .insert_session(ip(ip_addr)?, user, &groups, duration, now)
            .map_err(store_err)?;
        Ok(rec.end_time)
    }

    /// User name when `ip_addr` holds a live session in `group`, else None.
    fn lookup(&self, ip_addr: &str, group: &str, now: Timestamp) -> PyResult<Option<String>> {
        let d = self.inner.lookup(ip(ip_addr)?, group, now).map_err(store_err)?;
        Ok(d.user().map(str::to_string))
    }

    fn logout(&self, ip_addr: &str) -> PyResult<bool> {
        self.inner.logout(ip(ip_addr)?).map_err(store_err)
    }

    fn purge_expired(&self, now: Timestamp) -> PyResult<usize> {
        self.inner.purge_expired(now).map_err(store_err)
    }

    /// `(user, end_time, last_activity)` of the live session, or None.
    fn session(&self, ip_addr: &str, now: Timestamp) -> PyResult<Option<(String, Timestamp, Timestamp)>> {
        let rec = self.inner.session(ip(ip_addr)?, now).map_err(store_err)?;
        Ok(rec.map(|r| (r.user, r.end_time, r.last_activity)))
    }

    /// Feed helper request lines to the store at time `now`; returns the
    /// response lines exactly as the helper process would write them.
    #[pyo3(signature = (input, group = "internet", now = 0))]
    fn run_helper(&self, input: &str, group: &str, now: Timestamp) -> PyResult<String> {
        let mut out = Vec::new();
        let clock = ManualClock::new(now);
        run_helper_loop(Cursor::new(input.as_bytes()), &mut out, group, self.inner.as_ref(), &clock)
            .map_err(|e| PyOSError::new_err(e.to_string()))?;
        String::from_utf8(out).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("SessionStore({:?})", self.locator)
    }
}

/// Policy engine over a [`PySessionStore`], with its own answer cache.
#[pyclass(name = "AclEngine", module = "ipgate", frozen)]
struct PyAclEngine {
    inner: ipgate::AclEngine,
}

#[pymethods]
impl PyAclEngine {
    #[new]
    #[pyo3(signature = (store, mode, domains, group = "internet", ttl = 300))]
    fn new(store: &PySessionStore, mode: &str, domains: Vec<String>, group: &str, ttl: u64) -> PyResult<Self> {
        let mode: PolicyMode = mode.parse().map_err(value_err)?;
        let policy = AclPolicy::new(mode, domains, group).map_err(value_err)?.with_ttl(ttl);
        Ok(PyAclEngine {
            inner: ipgate::AclEngine::new(policy, store.inner.clone()),
        })
    }

    /// Judge a GET of the absolute `uri` from `ip_addr`. Returns
    /// `(action, user)` where action is `allow`, `deny-needs-login` or
    /// `deny-blacklisted`.
    fn evaluate(&self, ip_addr: &str, uri: &str, now: Timestamp) -> PyResult<(&'static str, Option<String>)> {
        let req = HttpRequestSummary::get(ip(ip_addr)?, uri).map_err(value_err)?;
        Ok(verdict_tuple(&self.inner.evaluate(&req, now)))
    }

    fn cached_auth_check(&self, ip_addr: &str, now: Timestamp) -> PyResult<Option<String>> {
        Ok(self.inner.cached_auth_check(ip(ip_addr)?, now).user().map(str::to_string))
    }

    fn clear_cache(&self) {
        self.inner.cache().clear();
    }
}

#[pyfunction]
fn match_domain(host: &str, patterns: Vec<String>) -> bool {
    ipgate::match_domain(host, &patterns)
}

/// Verdict table: `(action, user)` for a policy mode, whether the host is
/// listed, and the session answer (user name or None).
#[pyfunction]
#[pyo3(signature = (mode, listed, user = None))]
fn decide(mode: &str, listed: bool, user: Option<String>) -> PyResult<(&'static str, Option<String>)> {
    let mode: PolicyMode = mode.parse().map_err(value_err)?;
    Ok(verdict_tuple(&ipgate::acl::decide(mode, listed, &decision(user))))
}

/// Client address named by one helper request line.
#[pyfunction]
fn parse_helper_request_ip(line: &str) -> PyResult<String> {
    parse_helper_request(line).map(|q| q.ip.to_string()).map_err(value_err)
}

/// Helper answer line (without newline) for a user name or None.
#[pyfunction]
#[pyo3(signature = (user = None))]
fn format_helper_reply(user: Option<String>) -> String {
    format_helper_response(&decision(user)).as_str().to_string()
}

/// Absolute URI for a request line and its headers, as the proxy sees it.
#[pyfunction]
#[pyo3(signature = (request_line, headers = Vec::new()))]
fn reconstruct_uri(request_line: &str, headers: Vec<(String, String)>) -> PyResult<String> {
    let mut h = Headers::new();
    for (name, value) in headers {
        h.push(name, value);
    }
    ipgate::proxy::reconstruct_uri(request_line, &h).map_err(value_err)
}

#[pyfunction]
fn hash_password(password: &str) -> String {
    ipgate::auth::hash_password(password)
}

/// Check a login against credentials-file text. Returns the user's groups
/// on success and None otherwise.
#[pyfunction]
fn verify_credentials(credentials: &str, user: &str, password: &str) -> PyResult<Option<Vec<String>>> {
    let records = parse_credentials(credentials).map_err(value_err)?;
    let r = flatfile_verify(user, password, &records);
    Ok(r.is_success().then(|| r.groups().to_vec()))
}

#[pymodule]
#[pyo3(name = "ipgate")]
fn ipgate_python(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySessionStore>()?;
    m.add_class::<PyAclEngine>()?;
    m.add_function(wrap_pyfunction!(match_domain, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(parse_helper_request_ip, m)?)?;
    m.add_function(wrap_pyfunction!(format_helper_reply, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_uri, m)?)?;
    m.add_function(wrap_pyfunction!(hash_password, m)?)?;
    m.add_function(wrap_pyfunction!(verify_credentials, m)?)?;
    Ok(())
}
