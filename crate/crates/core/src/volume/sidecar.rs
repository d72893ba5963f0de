use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-series sidecar document written next to the NIfTI file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesMetadata {
    pub series_id: Option<String>,
    pub patient_id: Option<String>,
    /// Reconstruction kernel, e.g. `"H30s"` or `"bone"`.
    pub kernel: Option<String>,
    pub image_type: Vec<String>,
    /// Acquisition labels such as the series description.
    pub labels: Vec<String>,
}

impl SeriesMetadata {
    /// Union of tags, keeping `self`'s scalar fields where set.
    pub fn merged_with(mut self, other: SeriesMetadata) -> SeriesMetadata {
        self.series_id = self.series_id.or(other.series_id);
        self.patient_id = self.patient_id.or(other.patient_id);
        self.kernel = self.kernel.or(other.kernel);
        for t in other.image_type {
            if !self.image_type.contains(&t) {
                self.image_type.push(t);
            }
        }
        for t in other.labels {
            if !self.labels.contains(&t) {
                self.labels.push(t);
            }
        }
        self
    }
}

/// `scan.nii.gz` -> `scan.json`, the converter's sidecar convention.
pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    let name = volume_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    volume_path.with_file_name(format!("{stem}.json"))
}

/// Reads the sidecar if present.
pub fn load_sidecar(volume_path: &Path) -> Result<Option<SeriesMetadata>> {
    let path = sidecar_path(volume_path);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}
