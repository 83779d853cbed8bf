//! On-disk checkpoint: `state.json` plus one JSON-lines segment per batch.
//!
//! A segment is written before the state that lists it, and both go through
//! a temp file and rename, so a crash leaves either the old or the new
//! checkpoint, never a torn one.

use super::{ChunkResult, ExecError};
use crate::cost::LedgerSnapshot;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub run_id: String,
    pub config_digest: String,
    pub completed: BTreeSet<String>,
    /// Batches checkpointed so far, over all invocations.
    pub batch_cursor: usize,
    pub segments: usize,
    pub ledger: LedgerSnapshot,
    /// Length of `audit.log` covered by this checkpoint.
    pub audit_len: u64,
    pub started_at: DateTime<Utc>,
}

impl CheckpointState {
    pub fn new(run_id: &str, config_digest: &str, started_at: DateTime<Utc>) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_digest: config_digest.to_string(),
            completed: BTreeSet::new(),
            batch_cursor: 0,
            segments: 0,
            ledger: LedgerSnapshot::default(),
            audit_len: 0,
            started_at,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointDir {
    dir: PathBuf,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

impl CheckpointDir {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    fn segment_path(&self, n: usize) -> PathBuf {
        self.dir.join(format!("segment-{n:05}.jsonl"))
    }

    pub fn load(&self) -> Result<Option<CheckpointState>, ExecError> {
        match fs::read(self.state_path()) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ExecError::Store(format!("corrupt checkpoint state: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ExecError::io(&self.state_path(), e)),
        }
    }

    pub fn save(&self, state: &CheckpointState) -> Result<(), ExecError> {
        fs::create_dir_all(&self.dir).map_err(|e| ExecError::io(&self.dir, e))?;
        let bytes = serde_json::to_vec_pretty(state).expect("state serializes");
        write_atomic(&self.state_path(), &bytes).map_err(|e| ExecError::io(&self.state_path(), e))
    }

    pub fn write_segment(&self, n: usize, results: &[ChunkResult]) -> Result<(), ExecError> {
        fs::create_dir_all(&self.dir).map_err(|e| ExecError::io(&self.dir, e))?;
        let mut buf = Vec::new();
        for r in results {
            serde_json::to_writer(&mut buf, r).expect("result serializes");
            buf.push(b'\n');
        }
        let path = self.segment_path(n);
        write_atomic(&path, &buf).map_err(|e| ExecError::io(&path, e))
    }

    pub fn read_segments(&self, count: usize) -> Result<Vec<ChunkResult>, ExecError> {
        let mut out = Vec::new();
        for n in 0..count {
            let path = self.segment_path(n);
            let f = fs::File::open(&path).map_err(|e| ExecError::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| ExecError::io(&path, e))?;
                out.push(
                    serde_json::from_str(&line)
                        .map_err(|e| ExecError::Store(format!("{}: {e}", path.display())))?,
                );
            }
        }
        Ok(out)
    }
}
