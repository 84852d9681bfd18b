use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};

use super::{validate_insert, AuthDecision, GroupMembership, SessionRecord, SessionStore, StoreError};
use crate::clock::Timestamp;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS `addresses` (
    `ip`            TEXT    NOT NULL PRIMARY KEY,
    `user`          TEXT    NOT NULL,
    `end_time`      INTEGER NOT NULL,
    `last_activity` INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS `addresses_user` ON `addresses`(`user`);
CREATE TABLE IF NOT EXISTS `groups` (
    `user`  TEXT NOT NULL,
    `group` TEXT NOT NULL,
    PRIMARY KEY (`user`, `group`)
);
";

/// Durable store in an SQLite file with the `addresses`/`groups` schema.
/// Several processes (proxy, login service, helpers) may open the same file.
pub struct SqliteStore {
    conn: Mutex<Connection>,
    inactivity: Option<u64>,
}

fn unavailable(e: rusqlite::Error) -> StoreError {
    StoreError::Unavailable(e.to_string())
}

fn ts(t: Timestamp) -> i64 {
    i64::try_from(t).unwrap_or(i64::MAX)
}

impl SqliteStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let conn = Connection::open(path).map_err(unavailable)?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory().map_err(unavailable)?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.busy_timeout(Duration::from_secs(5)).map_err(unavailable)?;
        conn.execute_batch(SCHEMA).map_err(unavailable)?;
        Ok(SqliteStore {
            conn: Mutex::new(conn),
            inactivity: None,
        })
    }

    pub fn with_inactivity(mut self, window: Option<u64>) -> Self {
        self.inactivity = window;
        self
    }

    /// Write raw rows without validation or cleanup, replacing any session
    /// already held by the same IP.
    pub fn import(
        &self,
        records: impl IntoIterator<Item = SessionRecord>,
        memberships: impl IntoIterator<Item = GroupMembership>,
    ) -> Result<(), StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction().map_err(unavailable)?;
        for r in records {
            tx.execute(
                "INSERT OR REPLACE INTO `addresses` (`ip`, `user`, `end_time`, `last_activity`) VALUES (?1, ?2, ?3, ?4)",
                params![r.ip.to_string(), r.user, ts(r.end_time), ts(r.last_activity)],
            )
            .map_err(unavailable)?;
        }
        for m in memberships {
            tx.execute(
                "INSERT OR IGNORE INTO `groups` (`user`, `group`) VALUES (?1, ?2)",
                params![m.user, m.group],
            )
            .map_err(unavailable)?;
        }
        tx.commit().map_err(unavailable)
    }

    /// Both tables, sessions ordered by IP and memberships by (user, group).
    pub fn snapshot(&self) -> Result<(Vec<SessionRecord>, Vec<GroupMembership>), StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn
            .prepare("SELECT `ip`, `user`, `end_time`, `last_activity` FROM `addresses`")
            .map_err(unavailable)?;
        let mut records = stmt
            .query_map([], |row| {
                Ok((row.get::<_, String>(0)?, row.get(1)?, row.get::<_, i64>(2)?, row.get::<_, i64>(3)?))
            })
            .map_err(unavailable)?
            .map(|r| {
                let (ip, user, end, last) = r.map_err(unavailable)?;
                Ok(SessionRecord {
                    ip: ip.parse().map_err(|_| StoreError::Unavailable(format!("corrupt ip {ip:?}")))?,
                    user,
                    end_time: end as Timestamp,
                    last_activity: last as Timestamp,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        records.sort_by_key(|r| r.ip);
        let mut stmt = conn
            .prepare("SELECT `user`, `group` FROM `groups` ORDER BY `user`, `group`")
            .map_err(unavailable)?;
        let groups = stmt
            .query_map([], |row| Ok(GroupMembership::new(row.get::<_, String>(0)?, row.get::<_, String>(1)?)))
            .map_err(unavailable)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(unavailable)?;
        Ok((records, groups))
    }

    fn purge_in(&self, tx: &rusqlite::Transaction<'_>, now: Timestamp) -> rusqlite::Result<usize> {
        let removed = match self.inactivity {
            None => tx.execute("DELETE FROM `addresses` WHERE `end_time` < ?1", params![ts(now)])?,
            Some(w) => tx.execute(
                "DELETE FROM `addresses` WHERE `end_time` < ?1 OR ?1 - `last_activity` > ?2",
                params![ts(now), ts(w)],
            )?,
        };
        drop_orphans(tx)?;
        Ok(removed)
    }
}

fn drop_orphans(tx: &rusqlite::Transaction<'_>) -> rusqlite::Result<usize> {
    tx.execute(
        "DELETE FROM `groups` WHERE NOT EXISTS \
         (SELECT `user` FROM `addresses` WHERE `user` = `groups`.`user`)",
        [],
    )
}

impl SessionStore for SqliteStore {
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
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(unavailable)?;
        (|| {
            tx.execute(
                "INSERT OR REPLACE INTO `addresses` (`ip`, `user`, `end_time`, `last_activity`) \
                 VALUES (?1, ?2, ?3, ?4)",
                params![ip.to_string(), user, ts(record.end_time), ts(now)],
            )?;
            tx.execute("DELETE FROM `groups` WHERE `user` = ?1", params![user])?;
            for g in groups {
                tx.execute(
                    "INSERT OR IGNORE INTO `groups` (`user`, `group`) VALUES (?1, ?2)",
                    params![user, g],
                )?;
            }
            drop_orphans(&tx)?;
            Ok(())
        })()
        .map_err(unavailable)?;
        tx.commit().map_err(unavailable)?;
        Ok(record)
    }

    fn purge_expired(&self, now: Timestamp) -> Result<usize, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(unavailable)?;
        let n = self.purge_in(&tx, now).map_err(unavailable)?;
        tx.commit().map_err(unavailable)?;
        Ok(n)
    }

    fn lookup(&self, ip: Ipv4Addr, group: &str, now: Timestamp) -> Result<AuthDecision, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(unavailable)?;
        self.purge_in(&tx, now).map_err(unavailable)?;
        let user: Option<String> = tx
            .query_row(
                "SELECT `addresses`.`user` FROM `addresses` JOIN `groups` USING(`user`) \
                 WHERE `addresses`.`ip` = ?1 AND `groups`.`group` = ?2 LIMIT 0, 1",
                params![ip.to_string(), group],
                |row| row.get(0),
            )
            .optional()
            .map_err(unavailable)?;
        if user.is_some() && self.inactivity.is_some() {
            tx.execute(
                "UPDATE `addresses` SET `last_activity` = ?1 WHERE `ip` = ?2",
                params![ts(now), ip.to_string()],
            )
            .map_err(unavailable)?;
        }
        tx.commit().map_err(unavailable)?;
        Ok(match user {
            Some(user) => AuthDecision::Ok { user },
            None => AuthDecision::Err,
        })
    }

    fn logout(&self, ip: Ipv4Addr) -> Result<bool, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(unavailable)?;
        let n = tx
            .execute("DELETE FROM `addresses` WHERE `ip` = ?1", params![ip.to_string()])
            .map_err(unavailable)?;
        drop_orphans(&tx).map_err(unavailable)?;
        tx.commit().map_err(unavailable)?;
        Ok(n > 0)
    }

    fn session(&self, ip: Ipv4Addr, now: Timestamp) -> Result<Option<SessionRecord>, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(unavailable)?;
        self.purge_in(&tx, now).map_err(unavailable)?;
        let record = tx
            .query_row(
                "SELECT `user`, `end_time`, `last_activity` FROM `addresses` WHERE `ip` = ?1",
                params![ip.to_string()],
                |row| {
                    Ok(SessionRecord {
                        ip,
                        user: row.get(0)?,
                        end_time: row.get::<_, i64>(1)?.max(0) as u64,
                        last_activity: row.get::<_, i64>(2)?.max(0) as u64,
                    })
                },
            )
            .optional()
            .map_err(unavailable)?;
        tx.commit().map_err(unavailable)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Timestamp = 1_700_000_000;

    #[test]
    fn basic_flow() {
        let store = SqliteStore::open_in_memory().unwrap();
        let ip = Ipv4Addr::new(10, 0, 0, 5);
        store
            .insert_session(ip, "alice", &["internet".into()], 300, T0)
            .unwrap();
        assert_eq!(store.lookup(ip, "internet", T0).unwrap(), AuthDecision::ok("alice"));
        assert_eq!(store.lookup(ip, "admins", T0).unwrap(), AuthDecision::Err);
        assert_eq!(store.session(ip, T0 + 10).unwrap().unwrap().end_time, T0 + 300);
        assert_eq!(store.lookup(ip, "internet", T0 + 301).unwrap(), AuthDecision::Err);
        assert_eq!(store.purge_expired(T0 + 301).unwrap(), 0);
    }

    #[test]
    fn shared_between_handles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.db");
        let writer = SqliteStore::open(&path).unwrap();
        let reader = SqliteStore::open(&path).unwrap();
        let ip = Ipv4Addr::new(10, 0, 0, 7);
        writer
            .insert_session(ip, "bob", &["internet".into()], 60, T0)
            .unwrap();
        assert_eq!(reader.lookup(ip, "internet", T0).unwrap(), AuthDecision::ok("bob"));
        assert!(reader.logout(ip).unwrap());
        assert_eq!(writer.lookup(ip, "internet", T0).unwrap(), AuthDecision::Err);
    }

    #[test]
    fn unopenable_path_is_unavailable() {
        let err = SqliteStore::open(Path::new("/nonexistent-dir/for/sure/s.db")).err().unwrap();
        assert!(matches!(err, StoreError::Unavailable(_)));
    }
}
