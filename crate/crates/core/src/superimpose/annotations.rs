//! Append-only JSON-lines log of inspector decisions.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::SuperimposedBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

/// One line of the log. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// RFC 3339, UTC.
    pub timestamp: String,
    pub inspector: String,
    pub batch_id: String,
    pub series_id: String,
    pub voxel: [usize; 3],
    pub verdict: Verdict,
    pub comment: String,
}

/// Single writer over the log file. Each record is one `write` of a full
/// line followed by `sync_data`.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AnnotationLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(AnnotationLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &AnnotationRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line)
            .and_then(|_| file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(&self) -> Result<Vec<AnnotationRecord>> {
        let _guard = self.file.lock().unwrap_or_else(|p| p.into_inner());
        read_log(&self.path)
    }
}

/// All records in file order. A missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidParameter(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Final record per series; later records override earlier ones.
pub fn resolve_verdicts<'a>(
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> BTreeMap<String, &'a AnnotationRecord> {
    let mut out = BTreeMap::new();
    for r in records {
        out.insert(r.series_id.clone(), r);
    }
    out
}

/// Validates membership and voxel bounds, then appends a timestamped record.
pub fn record_annotation(
    log: &AnnotationLog,
    batch: &SuperimposedBatch,
    series_id: &str,
    voxel: [usize; 3],
    verdict: Verdict,
    comment: &str,
    inspector: &str,
) -> Result<AnnotationRecord> {
    if !batch.is_member(series_id) {
        return Err(Error::UnknownSeries {
            batch_id: batch.batch_id().to_string(),
            series_id: series_id.to_string(),
        });
    }
    let [x, y, z] = voxel;
    if !batch.grid().contains(x, y, z) {
        return Err(Error::VoxelOutOfBounds {
            x,
            y,
            z,
            dims: batch.grid().dims(),
        });
    }
    let record = AnnotationRecord {
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        inspector: inspector.to_string(),
        batch_id: batch.batch_id().to_string(),
        series_id: series_id.to_string(),
        voxel,
        verdict,
        comment: comment.to_string(),
    };
    log.append(&record)?;
    Ok(record)
}
