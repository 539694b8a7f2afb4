use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Upload,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub caller: String,
    pub action: AuditAction,
    pub dataset_id: String,
    pub dimension: Option<String>,
    pub metric: Option<String>,
}

struct Inner {
    records: Vec<AuditRecord>,
    file: Option<File>,
}

/// Append-only request log. Appends are serialized by one lock, so `seq`
/// order, file order and memory order agree.
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                file: None,
            }),
        }
    }

    /// Reloads records already on disk, then appends after them.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let io = |source| ServiceError::Io {
            context: format!("audit log {}", path.display()),
            source,
        };
        let mut records = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: AuditRecord = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Config(format!("audit log {} line {}: {e}", path.display(), i + 1)))?;
                records.push(r);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                records,
                file: Some(file),
            }),
        })
    }

    pub fn append(
        &self,
        caller: &str,
        action: AuditAction,
        dataset_id: &str,
        dimension: Option<&str>,
        metric: Option<&str>,
    ) -> Result<AuditRecord, ServiceError> {
        let mut inner = self.inner.lock().expect("audit lock");
        let record = AuditRecord {
            seq: inner.records.last().map_or(0, |r| r.seq + 1),
            timestamp: Utc::now(),
            caller: caller.to_string(),
            action,
            dataset_id: dataset_id.to_string(),
            dimension: dimension.map(str::to_string),
            metric: metric.map(str::to_string),
        };
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&record).expect("audit record serializes");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|source| ServiceError::Io {
                    context: "appending audit record".into(),
                    source,
                })?;
        }
        inner.records.push(record.clone());
        Ok(record)
    }

    /// Records with `from <= timestamp < to`, in append order.
    pub fn query(&self, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> Vec<AuditRecord> {
        let inner = self.inner.lock().expect("audit lock");
        inner
            .records
            .iter()
            .filter(|r| from.is_none_or(|f| r.timestamp >= f) && to.is_none_or(|t| r.timestamp < t))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("audit lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persisted_records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.jsonl");
        {
            let log = AuditLog::open(&p).unwrap();
            log.append("a", AuditAction::Upload, "d1", None, None).unwrap();
            log.append("a", AuditAction::Evaluate, "d1", Some("gender"), Some("parity_gap")).unwrap();
        }
        let log = AuditLog::open(&p).unwrap();
        assert_eq!(log.len(), 2);
        let r = log.append("b", AuditAction::Evaluate, "d1", None, None).unwrap();
        assert_eq!(r.seq, 2);
        let all = log.query(None, None);
        assert_eq!(all.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn range_is_half_open() {
        let log = AuditLog::in_memory();
        let r = log.append("a", AuditAction::Upload, "d", None, None).unwrap();
        assert_eq!(log.query(Some(r.timestamp), None).len(), 1);
        assert!(log.query(None, Some(r.timestamp)).is_empty());
        assert!(log.query(Some(r.timestamp), Some(r.timestamp)).is_empty());
    }
}
