use std::collections::{BTreeSet, HashMap, HashSet};
use std::net::Ipv4Addr;

use parking_lot::Mutex;

use super::{validate_insert, AuthDecision, GroupMembership, SessionRecord, SessionStore, StoreError};
use crate::clock::Timestamp;

#[derive(Debug, Default)]
struct Tables {
    addresses: HashMap<Ipv4Addr, SessionRecord>,
    groups: BTreeSet<GroupMembership>,
}

impl Tables {
    fn purge(&mut self, now: Timestamp, inactivity: Option<u64>) -> usize {
        let before = self.addresses.len();
        self.addresses.retain(|_, r| {
            let expired = r.end_time < now;
            let idle = inactivity.is_some_and(|w| now.saturating_sub(r.last_activity) > w);
            !(expired || idle)
        });
        let removed = before - self.addresses.len();
        self.drop_orphans();
        removed
    }

    fn drop_orphans(&mut self) {
        let owners: HashSet<&str> = self.addresses.values().map(|r| r.user.as_str()).collect();
        self.groups.retain(|m| owners.contains(m.user.as_str()));
    }
}

/// In-process store. All state sits behind one lock, so purge-then-select
/// is atomic for every caller.
#[derive(Debug, Default)]
pub struct MemoryStore {
    tables: Mutex<Tables>,
    inactivity: Option<u64>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also expire sessions that have not been looked up for `window`
    /// seconds. `None` disables the check.
    pub fn with_inactivity(mut self, window: Option<u64>) -> Self {
        self.inactivity = window;
        self
    }

    /// Seed raw table contents without any validation or cleanup. Later
    /// records for the same IP replace earlier ones.
    pub fn from_rows(
        records: impl IntoIterator<Item = SessionRecord>,
        memberships: impl IntoIterator<Item = GroupMembership>,
    ) -> Self {
        let mut tables = Tables::default();
        for r in records {
            tables.addresses.insert(r.ip, r);
        }
        tables.groups.extend(memberships);
        MemoryStore {
            tables: Mutex::new(tables),
            inactivity: None,
        }
    }

    /// Copy of both tables, sessions ordered by IP.
    pub fn snapshot(&self) -> (Vec<SessionRecord>, Vec<GroupMembership>) {
        let tables = self.tables.lock();
        let mut records: Vec<_> = tables.addresses.values().cloned().collect();
        records.sort_by_key(|r| r.ip);
        (records, tables.groups.iter().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.tables.lock().addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SessionStore for MemoryStore {
    fn insert_session(
        &self,
        ip: Ipv4Addr,
        user: &str,
        groups: &[String],
        duration: u64,
        now: Timestamp,
    ) -> Result<SessionRecord, StoreError> {
        validate_insert(user, groups, duration)?;
        let record = SessionRecord {
            ip,
            user: user.to_string(),
            end_time: now.saturating_add(duration),
            last_activity: now,
        };
        let mut tables = self.tables.lock();
        tables.addresses.insert(ip, record.clone());
        tables.groups.retain(|m| m.user != user);
        for g in groups {
            tables.groups.insert(GroupMembership::new(user, g.as_str()));
        }
        tables.drop_orphans();
        Ok(record)
    }

    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError> {
        Ok(self.tables.lock().purge(now, self.inactivity))
    }

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError> {
        let mut tables = self.tables.lock();
        tables.purge(now, self.inactivity);
        let Some(user) = tables.addresses.get(&ip).map(|r| r.user.clone()) else {
            return Ok(AuthDecision::Err);
        };
        if !tables.groups.contains(&GroupMembership::new(user.as_str(), group)) {
            return Ok(AuthDecision::Err);
        }
        if self.inactivity.is_some() {
            if let Some(r) = tables.addresses.get_mut(&ip) {
                r.last_activity = now;
            }
        }
        Ok(AuthDecision::Ok { user })
    }

    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError> {
        let mut tables = self.tables.lock();
        let existed = tables.addresses.remove(&ip).is_some();
        tables.drop_orphans();
        Ok(existed)
    }

    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError> {
        let mut tables = self.tables.lock();
        tables.purge(now, self.inactivity);
        Ok(tables.addresses.get(&ip).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Timestamp = 1_700_000_000;

    fn ip(last: u8) -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, last)
    }

    fn groups(gs: &[&str]) -> Vec<String> {
        gs.iter().map(|g| g.to_string()).collect()
    }

    fn record(ip: Ipv4Addr, user: &str, end_time: Timestamp) -> SessionRecord {
        SessionRecord {
            ip,
            user: user.into(),
            end_time,
            last_activity: T0,
        }
    }

    #[test]
    fn insert_sets_end_time() {
        let store = MemoryStore::new();
        let r = store
            .insert_session(ip(5), "alice", &groups(&["internet"]), 3600, T0)
            .unwrap();
        assert_eq!(r.end_time, T0 + 3600);
        assert_eq!(r.user, "alice");
    }

    #[test]
    fn insert_same_ip_replaces() {
        let store = MemoryStore::new();
        store.insert_session(ip(5), "alice", &groups(&["internet"]), 3600, T0).unwrap();
        store.insert_session(ip(5), "bob", &groups(&["internet"]), 60, T0).unwrap();
        let (records, members) = store.snapshot();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].user, "bob");
        // alice's only session is gone, so are her groups
        assert_eq!(members, vec![GroupMembership::new("bob", "internet")]);
    }

    #[test]
    fn insert_rejects_bad_input() {
        let store = MemoryStore::new();
        assert_eq!(
            store.insert_session(ip(5), "alice", &groups(&["internet"]), 0, T0),
            Err(StoreError::InvalidDuration)
        );
        assert_eq!(
            store.insert_session(ip(5), "", &groups(&["internet"]), 10, T0),
            Err(StoreError::EmptyUser)
        );
        assert_eq!(
            store.insert_session(ip(5), "alice", &[], 10, T0),
            Err(StoreError::NoGroups)
        );
        assert!(store.is_empty());
    }

    #[test]
    fn purge_removes_expired_and_orphans() {
        let store = MemoryStore::from_rows(
            [record(ip(1), "a", T0 - 1), record(ip(2), "b", T0 - 5), record(ip(3), "c", T0 + 100)],
            [
                GroupMembership::new("a", "internet"),
                GroupMembership::new("b", "internet"),
                GroupMembership::new("c", "internet"),
            ],
        );
        assert_eq!(store.purge_expired(T0).unwrap(), 2);
        let (records, members) = store.snapshot();
        assert_eq!(records, vec![record(ip(3), "c", T0 + 100)]);
        assert_eq!(members, vec![GroupMembership::new("c", "internet")]);
        assert_eq!(store.purge_expired(T0).unwrap(), 0);
    }

    #[test]
    fn purge_empty_store() {
        assert_eq!(MemoryStore::new().purge_expired(T0).unwrap(), 0);
    }

    #[test]
    fn end_time_equal_to_now_is_still_live() {
        let store = MemoryStore::from_rows(
            [record(ip(1), "a", T0)],
            [GroupMembership::new("a", "internet")],
        );
        assert_eq!(store.lookup(ip(1), "internet", T0).unwrap(), AuthDecision::ok("a"));
        assert_eq!(store.lookup(ip(1), "internet", T0 + 1).unwrap(), AuthDecision::Err);
    }

    #[test]
    fn lookup_cases() {
        let store = MemoryStore::from_rows(
            [record(ip(5), "alice", T0 + 300)],
            [GroupMembership::new("alice", "internet")],
        );
        assert_eq!(store.lookup(ip(5), "internet", T0).unwrap(), AuthDecision::ok("alice"));
        assert_eq!(store.lookup(ip(5), "admins", T0).unwrap(), AuthDecision::Err);
        assert_eq!(store.lookup(ip(6), "internet", T0).unwrap(), AuthDecision::Err);
        assert_eq!(store.lookup(ip(5), "internet", T0 + 301).unwrap(), AuthDecision::Err);
        assert!(store.is_empty());
    }

    #[test]
    fn logout_cases() {
        let store = MemoryStore::new();
        store.insert_session(ip(5), "alice", &groups(&["internet"]), 300, T0).unwrap();
        assert!(store.logout(ip(5)).unwrap());
        assert_eq!(store.lookup(ip(5), "internet", T0).unwrap(), AuthDecision::Err);
        assert!(!store.logout(ip(9)).unwrap());
        assert_eq!(store.purge_expired(T0 + 1000).unwrap(), 0);
        assert!(store.snapshot().1.is_empty());
    }

    #[test]
    fn relogin_replaces_user_groups() {
        let store = MemoryStore::new();
        store.insert_session(ip(1), "alice", &groups(&["internet", "staff"]), 300, T0).unwrap();
        store.insert_session(ip(2), "alice", &groups(&["internet"]), 300, T0).unwrap();
        assert_eq!(store.lookup(ip(1), "staff", T0).unwrap(), AuthDecision::Err);
        assert_eq!(store.lookup(ip(1), "internet", T0).unwrap(), AuthDecision::ok("alice"));
    }

    #[test]
    fn inactivity_window() {
        let store = MemoryStore::new().with_inactivity(Some(60));
        store.insert_session(ip(5), "alice", &groups(&["internet"]), 3600, T0).unwrap();
        // each Ok refreshes the idle timer
        assert!(store.lookup(ip(5), "internet", T0 + 50).unwrap().is_ok());
        assert!(store.lookup(ip(5), "internet", T0 + 110).unwrap().is_ok());
        assert_eq!(store.purge_expired(T0 + 171).unwrap(), 1);
        assert!(store.snapshot().1.is_empty());
    }

    #[test]
    fn inactivity_disabled_by_default() {
        let store = MemoryStore::new();
        store.insert_session(ip(5), "alice", &groups(&["internet"]), 3600, T0).unwrap();
        assert!(store.lookup(ip(5), "internet", T0 + 3000).unwrap().is_ok());
    }

    #[test]
    fn session_reports_live_record() {
        let store = MemoryStore::new();
        store.insert_session(ip(5), "alice", &groups(&["internet"]), 300, T0).unwrap();
        assert_eq!(store.session(ip(5), T0 + 100).unwrap().unwrap().remaining(T0 + 100), 200);
        assert!(store.session(ip(5), T0 + 301).unwrap().is_none());
    }
}
