//! On-disk layout shared by the pipeline, the CLI and the inspection service.
//!
//! ```text
//! <root>/templates/<template_id>.nii.gz
//! <root>/registered/<series_id>.nii.gz
//! <root>/batches/<batch_id>/count.nii.gz
//! <root>/batches/<batch_id>/members.json
//! <root>/annotations.jsonl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{binarize, build_batch, SuperimposedBatch, ThresholdParams};
use crate::error::{Error, Result};
use crate::ssim::TemplateId;
use crate::volume::{load_volume, read_nifti, save_counts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMember {
    pub series_id: String,
    /// Registered volume, relative to the data directory.
    pub registered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batch_id: String,
    pub template_id: TemplateId,
    pub threshold_hu: f64,
    pub dims: [usize; 3],
    pub members: Vec<BatchMember>,
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

fn checked(component: &str) -> Result<&str> {
    let ok = !component.is_empty() && component != "." && component != ".." && !component.contains(['/', '\\', '\0']);
    if ok {
        Ok(component)
    } else {
        Err(Error::InvalidParameter(format!("unsafe identifier {component:?}")))
    }
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["templates", "registered", "batches"] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn template_path(&self, id: TemplateId) -> PathBuf {
        self.root.join("templates").join(format!("{id}.nii.gz"))
    }

    pub fn registered_relative(series_id: &str) -> Result<String> {
        Ok(format!("registered/{}.nii.gz", checked(series_id)?))
    }

    pub fn registered_path(&self, series_id: &str) -> Result<PathBuf> {
        Ok(self.root.join(DataDir::registered_relative(series_id)?))
    }

    pub fn batch_dir(&self, batch_id: &str) -> Result<PathBuf> {
        Ok(self.root.join("batches").join(checked(batch_id)?))
    }

    pub fn annotation_log_path(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }

    pub fn save_batch(&self, batch: &SuperimposedBatch, manifest: &BatchManifest) -> Result<()> {
        let dir = self.batch_dir(batch.batch_id())?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_counts(&dir.join("count.nii.gz"), batch.grid(), batch.count_volume())?;
        let json = serde_json::to_string_pretty(manifest)?;
        let path = dir.join("members.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(&self, batch_id: &str) -> Result<BatchManifest> {
        let path = self.batch_dir(batch_id)?.join("members.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Persisted batch manifests sorted by id.
    pub fn list_batches(&self) -> Result<Vec<BatchManifest>> {
        let dir = self.root.join("batches");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().join("members.json").exists() {
                let id = entry.file_name().to_string_lossy().into_owned();
                out.push(self.read_manifest(&id)?);
            }
        }
        out.sort_by(|a, b| a.batch_id.cmp(&b.batch_id));
        Ok(out)
    }

    /// Rebuilds member masks from the registered volumes and checks them
    /// against the stored count volume.
    pub fn load_batch(&self, batch_id: &str) -> Result<(SuperimposedBatch, BatchManifest)> {
        let manifest = self.read_manifest(batch_id)?;
        let threshold = ThresholdParams {
            thresh: manifest.threshold_hu,
        };
        let masks = manifest
            .members
            .iter()
            .map(|m| {
                let v = load_volume(&self.root.join(&m.registered))?.with_series_id(&m.series_id);
                Ok(binarize(&v, &threshold))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = build_batch(batch_id, &masks, masks.len().max(1))?;
        let stored = read_nifti(&self.batch_dir(batch_id)?.join("count.nii.gz"))?;
        let consistent = stored.data.shape() == batch.count_volume().shape()
            && stored
                .data
                .iter()
                .zip(batch.count_volume().iter())
                .all(|(&s, &c)| s == c as f32);
        if !consistent {
            return Err(Error::GridMismatch(format!(
                "stored count volume of batch {batch_id} disagrees with its member volumes"
            )));
        }
        Ok((batch, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers_cannot_escape_the_root() {
        let d = DataDir::new("/data");
        assert!(d.registered_path("../etc/passwd").is_err());
        assert!(d.batch_dir("..").is_err());
        assert_eq!(
            d.registered_path("s01").unwrap(),
            Path::new("/data/registered/s01.nii.gz")
        );
    }

    #[test]
    fn empty_root_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(DataDir::new(dir.path()).list_batches().unwrap().is_empty());
    }
}
