//! Exact-key persistent response cache.
//!
//! Keys are request digests ([`ProviderRequest::digest`]). Entries hold the
//! raw response body and are immutable: re-putting a key with the same body
//! is a no-op, with a different body a [`CacheError::Conflict`].

use crate::canonical::HASH_ALGORITHM;
use crate::cost::TokenUsage;
use crate::gateway::ProviderRequest;
use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache entry {key} already holds a different body")]
    Conflict { key: String },
    #[error("cache store: {0}")]
    Store(String),
    #[error("cache store uses hash algorithm `{found}`, expected `{expected}`")]
    HashMismatch { found: String, expected: String },
}

impl From<rusqlite::Error> for CacheError {
    fn from(e: rusqlite::Error) -> Self {
        CacheError::Store(e.to_string())
    }
}

impl From<io::Error> for CacheError {
    fn from(e: io::Error) -> Self {
        CacheError::Store(e.to_string())
    }
}

impl From<serde_json::Error> for CacheError {
    fn from(e: serde_json::Error) -> Self {
        CacheError::Store(format!("corrupt entry: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn for_request(req: &ProviderRequest) -> Self {
        CacheKey(req.digest())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub body: String,
    pub usage: TokenUsage,
    pub created_at: DateTime<Utc>,
    pub schema_digest: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Sqlite,
    Memory,
    Files,
}

/// Storage behind a [`SemanticCache`]. `insert` must be atomic per entry.
pub trait CacheStore: Send + Sync {
    fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError>;
    /// Stores `entry` unless the key exists; returns the existing body if so.
    fn insert(&self, entry: &CacheEntry) -> Result<Option<String>, CacheError>;
    /// All entries in key order.
    fn entries(&self) -> Result<Vec<CacheEntry>, CacheError>;
    /// `(entry count, total body bytes)`.
    fn size(&self) -> Result<(u64, u64), CacheError>;
    /// Removes entries created strictly before `cutoff`; returns how many.
    fn prune_before(&self, cutoff: DateTime<Utc>) -> Result<u64, CacheError>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    map: Mutex<BTreeMap<CacheKey, CacheEntry>>,
}

impl CacheStore for MemoryStore {
    fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        Ok(self.map.lock().unwrap().get(key).cloned())
    }

    fn insert(&self, entry: &CacheEntry) -> Result<Option<String>, CacheError> {
        let mut map = self.map.lock().unwrap();
        if let Some(existing) = map.get(&entry.key) {
            return Ok(Some(existing.body.clone()));
        }
        map.insert(entry.key.clone(), entry.clone());
        Ok(None)
    }

    fn entries(&self) -> Result<Vec<CacheEntry>, CacheError> {
        Ok(self.map.lock().unwrap().values().cloned().collect())
    }

    fn size(&self) -> Result<(u64, u64), CacheError> {
        let map = self.map.lock().unwrap();
        Ok((map.len() as u64, map.values().map(|e| e.body.len() as u64).sum()))
    }

    fn prune_before(&self, cutoff: DateTime<Utc>) -> Result<u64, CacheError> {
        let mut map = self.map.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| e.created_at >= cutoff);
        Ok((before - map.len()) as u64)
    }
}

/// Single-file SQLite store in WAL mode.
#[derive(Debug)]
pub struct SqliteStore {
    conn: Mutex<Connection>,
}

impl SqliteStore {
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
             CREATE TABLE IF NOT EXISTS entries (
                 key TEXT PRIMARY KEY,
                 body TEXT NOT NULL,
                 input_tokens INTEGER NOT NULL,
                 output_tokens INTEGER NOT NULL,
                 estimated INTEGER NOT NULL,
                 created_at TEXT NOT NULL,
                 schema_digest TEXT NOT NULL
             );",
        )?;
        conn.execute(
            "INSERT OR IGNORE INTO meta (key, value) VALUES ('hash_algorithm', ?1)",
            params![HASH_ALGORITHM],
        )?;
        let found: String = conn.query_row("SELECT value FROM meta WHERE key = 'hash_algorithm'", [], |r| r.get(0))?;
        check_algorithm(&found)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn row_to_entry(row: &rusqlite::Row<'_>) -> rusqlite::Result<EntryRow> {
        Ok((row.get(0)?, row.get(1)?, row.get(2)?, row.get(3)?, row.get(4)?, row.get(5)?, row.get(6)?))
    }
}

fn check_algorithm(found: &str) -> Result<(), CacheError> {
    if found != HASH_ALGORITHM {
        return Err(CacheError::HashMismatch {
            found: found.to_string(),
            expected: HASH_ALGORITHM.to_string(),
        });
    }
    Ok(())
}

type EntryRow = (String, String, i64, i64, bool, String, String);

fn entry_from_row(row: EntryRow) -> Result<CacheEntry, CacheError> {
    let (key, body, input, output, estimated, created_at, schema_digest) = row;
    Ok(CacheEntry {
        key: CacheKey(key),
        body,
        usage: TokenUsage {
            input_tokens: input as u64,
            output_tokens: output as u64,
            estimated,
        },
        created_at: DateTime::parse_from_rfc3339(&created_at)
            .map_err(|e| CacheError::Store(format!("bad timestamp `{created_at}`: {e}")))?
            .with_timezone(&Utc),
        schema_digest,
    })
}

const SELECT_COLUMNS: &str = "SELECT key, body, input_tokens, output_tokens, estimated, created_at, schema_digest FROM entries";

impl CacheStore for SqliteStore {
    fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let conn = self.conn.lock().unwrap();
        let row = conn
            .query_row(&format!("{SELECT_COLUMNS} WHERE key = ?1"), params![key.0], Self::row_to_entry)
            .optional()?;
        row.map(entry_from_row).transpose()
    }

    fn insert(&self, entry: &CacheEntry) -> Result<Option<String>, CacheError> {
        let conn = self.conn.lock().unwrap();
        let changed = conn.execute(
            "INSERT OR IGNORE INTO entries VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                entry.key.0,
                entry.body,
                entry.usage.input_tokens as i64,
                entry.usage.output_tokens as i64,
                entry.usage.estimated,
                entry.created_at.to_rfc3339(),
                entry.schema_digest,
            ],
        )?;
        if changed == 1 {
            return Ok(None);
        }
        let body: String = conn.query_row("SELECT body FROM entries WHERE key = ?1", params![entry.key.0], |r| r.get(0))?;
        Ok(Some(body))
    }

    fn entries(&self) -> Result<Vec<CacheEntry>, CacheError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare(&format!("{SELECT_COLUMNS} ORDER BY key"))?;
        let rows = stmt.query_map([], Self::row_to_entry)?;
        rows.map(|r| entry_from_row(r?)).collect()
    }

    fn size(&self) -> Result<(u64, u64), CacheError> {
        let conn = self.conn.lock().unwrap();
        let (n, bytes): (i64, i64) = conn.query_row(
            "SELECT COUNT(*), COALESCE(SUM(LENGTH(CAST(body AS BLOB))), 0) FROM entries",
            [],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )?;
        Ok((n as u64, bytes as u64))
    }

    fn prune_before(&self, cutoff: DateTime<Utc>) -> Result<u64, CacheError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare("SELECT key, created_at FROM entries")?;
        let stale: Vec<String> = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?
            .filter_map(|r| r.ok())
            .filter(|(_, ts)| {
                DateTime::parse_from_rfc3339(ts).is_ok_and(|t| t.with_timezone(&Utc) < cutoff)
            })
            .map(|(k, _)| k)
            .collect();
        drop(stmt);
        let tx = conn.unchecked_transaction()?;
        for key in &stale {
            tx.execute("DELETE FROM entries WHERE key = ?1", params![key])?;
        }
        tx.commit()?;
        Ok(stale.len() as u64)
    }
}

/// One JSON file per entry, fanned out by key prefix, plus a `HEADER` file.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl DirStore {
    pub fn open(root: &Path) -> Result<Self, CacheError> {
        fs::create_dir_all(root)?;
        let header = root.join("HEADER");
        match fs::read_to_string(&header) {
            Ok(text) => {
                let found = text
                    .lines()
                    .find_map(|l| l.strip_prefix("hash_algorithm="))
                    .unwrap_or("")
                    .trim()
                    .to_string();
                check_algorithm(&found)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::write(&header, format!("hash_algorithm={HASH_ALGORITHM}\n"))?;
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            root: root.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        let prefix = key.0.get(..2).unwrap_or("__");
        self.root.join(prefix).join(format!("{}.json", key.0))
    }

    fn read(path: &Path) -> Result<CacheEntry, CacheError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    fn all_paths(&self) -> Result<Vec<PathBuf>, CacheError> {
        let mut paths = Vec::new();
        for dir in fs::read_dir(&self.root)? {
            let dir = dir?.path();
            if !dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&dir)? {
                let file = file?.path();
                if file.extension().is_some_and(|e| e == "json") {
                    paths.push(file);
                }
            }
        }
        paths.sort();
        Ok(paths)
    }
}

impl CacheStore for DirStore {
    fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let path = self.path_for(key);
        match fs::metadata(&path) {
            Ok(_) => Ok(Some(Self::read(&path)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn insert(&self, entry: &CacheEntry) -> Result<Option<String>, CacheError> {
        let _guard = self.write_lock.lock().unwrap();
        let path = self.path_for(&entry.key);
        if path.exists() {
            return Ok(Some(Self::read(&path)?.body));
        }
        fs::create_dir_all(path.parent().unwrap())?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(entry)?)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(None)
    }

    fn entries(&self) -> Result<Vec<CacheEntry>, CacheError> {
        let mut out: Vec<CacheEntry> = self.all_paths()?.iter().map(|p| Self::read(p)).collect::<Result<_, _>>()?;
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    fn size(&self) -> Result<(u64, u64), CacheError> {
        let entries = self.entries()?;
        Ok((entries.len() as u64, entries.iter().map(|e| e.body.len() as u64).sum()))
    }

    fn prune_before(&self, cutoff: DateTime<Utc>) -> Result<u64, CacheError> {
        let _guard = self.write_lock.lock().unwrap();
        let mut removed = 0;
        for path in self.all_paths()? {
            if Self::read(&path)?.created_at < cutoff {
                fs::remove_file(&path)?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

/// A store plus in-process hit/miss counters.
pub struct SemanticCache {
    store: Box<dyn CacheStore>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for SemanticCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticCache")
            .field("hits", &self.hits.load(Ordering::Relaxed))
            .field("misses", &self.misses.load(Ordering::Relaxed))
            .finish()
    }
}

pub const SQLITE_FILE: &str = "cache.sqlite3";
pub const FILES_DIR: &str = "entries";

impl SemanticCache {
    pub fn new(store: Box<dyn CacheStore>) -> Self {
        Self {
            store,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(Box::<MemoryStore>::default())
    }

    /// Opens the store for `backend` under `dir` (normally `<workspace>/cache`).
    pub fn open(dir: &Path, backend: Backend) -> Result<Self, CacheError> {
        let store: Box<dyn CacheStore> = match backend {
            Backend::Sqlite => Box::new(SqliteStore::open(&dir.join(SQLITE_FILE))?),
            Backend::Memory => Box::<MemoryStore>::default(),
            Backend::Files => Box::new(DirStore::open(&dir.join(FILES_DIR))?),
        };
        Ok(Self::new(store))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let found = self.store.get(key)?;
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(found)
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), CacheError> {
        match self.store.insert(entry)? {
            Some(existing) if existing != entry.body => Err(CacheError::Conflict {
                key: entry.key.0.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn stats(&self) -> Result<CacheStats, CacheError> {
        let (entries, bytes) = self.store.size()?;
        Ok(CacheStats {
            entries,
            bytes,
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        })
    }

    /// Writes every entry as one JSON line, in key order.
    pub fn export(&self, out: &mut dyn Write) -> Result<u64, CacheError> {
        let entries = self.store.entries()?;
        for e in &entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(entries.len() as u64)
    }

    pub fn prune_before(&self, cutoff: DateTime<Utc>) -> Result<u64, CacheError> {
        self.store.prune_before(cutoff)
    }
}
