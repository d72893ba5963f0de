//! Manifest of series seeds: CSV with a header row, or JSON lines.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::record::SeriesRecord;
use crate::error::{Error, Result};
use crate::volume::{load_sidecar, SeriesMetadata};

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct JsonEntry {
    series_id: String,
    patient_id: String,
    path: PathBuf,
    #[serde(default)]
    age: Option<f64>,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct CsvEntry {
    series_id: String,
    patient_id: String,
    path: PathBuf,
    #[serde(default)]
    age: Option<f64>,
    /// `;`-separated.
    #[serde(default)]
    tags: Option<String>,
}

fn safe_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

/// Loads the manifest and merges each series' sidecar. Relative paths are
/// taken from the manifest's directory; manifest tags become labels.
pub fn load_manifest(path: &Path) -> Result<Vec<SeriesRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let entries: Vec<JsonEntry> = if is_csv {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        rd.deserialize::<CsvEntry>()
            .map(|row| {
                let row = row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
                Ok(JsonEntry {
                    series_id: row.series_id,
                    patient_id: row.patient_id,
                    path: row.path,
                    age: row.age,
                    tags: row
                        .tags
                        .unwrap_or_default()
                        .split(';')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect(),
                })
            })
            .collect::<Result<_>>()?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<_>>()?
    };
    if entries.is_empty() {
        return Err(Error::Manifest(format!("{} lists no series", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    entries
        .into_iter()
        .map(|e| {
            if !safe_id(&e.series_id) {
                return Err(Error::Manifest(format!(
                    "series id {:?} is not a safe file name",
                    e.series_id
                )));
            }
            if !seen.insert(e.series_id.clone()) {
                return Err(Error::Manifest(format!("duplicate series id {}", e.series_id)));
            }
            if e.patient_id.is_empty() {
                return Err(Error::Manifest(format!("series {} has no patient id", e.series_id)));
            }
            let source = if e.path.is_relative() {
                base.join(&e.path)
            } else {
                e.path
            };
            let seed = SeriesMetadata {
                series_id: Some(e.series_id.clone()),
                patient_id: Some(e.patient_id.clone()),
                labels: e.tags,
                ..SeriesMetadata::default()
            };
            let metadata = match load_sidecar(&source)? {
                Some(side) => seed.merged_with(side),
                None => seed,
            };
            Ok(SeriesRecord::new(e.series_id, e.patient_id, source, e.age, metadata))
        })
        .collect()
}
