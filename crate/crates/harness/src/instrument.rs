//! Session store wrappers for observing and perturbing the system under test.

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ipgate::{AuthDecision, SessionRecord, SessionStore, StoreError, Timestamp};
use parking_lot::Mutex;

/// Records every lookup and can be switched into an "unreachable" state or
/// given an artificial per-lookup delay.
pub struct InstrumentedStore {
    inner: Arc<dyn SessionStore>,
    lookups: AtomicU64,
    looked_up: Mutex<Vec<Ipv4Addr>>,
    down: AtomicBool,
    delay: Option<Duration>,
}

impl InstrumentedStore {
    pub fn new(inner: Arc<dyn SessionStore>) -> Self {
        InstrumentedStore {
            inner,
            lookups: AtomicU64::new(0),
            looked_up: Mutex::new(Vec::new()),
            down: AtomicBool::new(false),
            delay: None,
        }
    }

    /// Sleep this long in every lookup, standing in for a remote database.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn lookups(&self) -> u64 {
        self.lookups.load(Ordering::SeqCst)
    }

    /// Source addresses passed to `lookup`, in call order.
    pub fn looked_up(&self) -> Vec<Ipv4Addr> {
        self.looked_up.lock().clone()
    }

    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.down.load(Ordering::SeqCst) {
            Err(StoreError::Unavailable("store unreachable (simulated)".into()))
        } else {
            Ok(())
        }
    }
}

impl SessionStore for InstrumentedStore {
    fn insert_session(
        &self,
        ip: Ipv4Addr,
        user: &str,
        groups: &[String],
        duration: u64,
        now: Timestamp,
    ) -> Result<SessionRecord, StoreError> {
        self.check()?;
        self.inner.insert_session(ip, user, groups, duration, now)
    }

    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError> {
        self.check()?;
        self.inner.purge_expired(now)
    }

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError> {
        self.lookups.fetch_add(1, Ordering::SeqCst);
        self.looked_up.lock().push(ip);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        self.check()?;
        self.inner.lookup(ip, group, now)
    }

    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError> {
        self.check()?;
        self.inner.logout(ip)
    }

    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError> {
        self.check()?;
        self.inner.session(ip, now)
    }
}
