//! Punctual snapshots of the store at a fixed interval.

use std::path::{Path, PathBuf};

use crate::store::Store;
use crate::RegistryError;

/// Tracks when the next snapshot is due. The first poll only arms the
/// schedule; a snapshot is then taken at every interval boundary crossed.
#[derive(Debug, Clone)]
pub struct BackupSchedule {
    dir: PathBuf,
    interval_ms: i64,
    next_due_ms: Option<i64>,
}

impl BackupSchedule {
    pub fn new(dir: &Path, interval_ms: i64) -> Self {
        Self {
            dir: dir.to_path_buf(),
            interval_ms: interval_ms.max(1),
            next_due_ms: None,
        }
    }

    pub fn next_due_ms(&self) -> Option<i64> {
        self.next_due_ms
    }

    /// Takes a snapshot if one is due at `now_ms`; returns its path.
    pub fn poll(&mut self, store: &Store, now_ms: i64) -> Result<Option<PathBuf>, RegistryError> {
        let Some(due) = self.next_due_ms else {
            self.next_due_ms = Some(now_ms + self.interval_ms);
            return Ok(None);
        };
        if now_ms < due {
            return Ok(None);
        }
        let path = snapshot_path(&self.dir, now_ms);
        store.backup_to(&path)?;
        let missed = (now_ms - due) / self.interval_ms;
        self.next_due_ms = Some(due + (missed + 1) * self.interval_ms);
        Ok(Some(path))
    }
}

pub fn snapshot_path(dir: &Path, at_ms: i64) -> PathBuf {
    dir.join(format!("registry-{at_ms}.db"))
}
