//! Slice information presence.
//!
//! A voxel is informative when its attenuation exceeds
//! `a_min = min(A) + (max(A) - min(A)) * t`, taken over the whole series `A`.
//! The presence of a slice is its fraction of informative voxels; values
//! near zero mean the slice shows little or none of the head.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceParams {
    /// Fraction of the attenuation range added to the minimum.
    pub tolerance: f64,
}

impl Default for PresenceParams {
    fn default() -> Self {
        PresenceParams { tolerance: 0.05 }
    }
}

impl PresenceParams {
    pub fn new(tolerance: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tolerance) {
            return Err(Error::InvalidParameter(format!(
                "presence tolerance must lie in [0, 1), got {tolerance}"
            )));
        }
        Ok(PresenceParams { tolerance })
    }
}

/// Informative-voxel threshold of a volume. NaN voxels are ignored; a volume
/// without finite values yields NaN, for which no voxel is informative.
pub fn compute_a_min(v: &Volume, p: &PresenceParams) -> f64 {
    match v.finite_range() {
        Some((lo, hi)) => {
            let (lo, hi) = (lo as f64, hi as f64);
            lo + (hi - lo) * p.tolerance
        }
        None => f64::NAN,
    }
}

/// Fraction of `slice` strictly above `a_min`.
pub fn slice_presence(slice: ArrayView2<'_, f32>, a_min: f64) -> f64 {
    let total = slice.len();
    if total == 0 {
        return 0.0;
    }
    let informative = slice.iter().filter(|&&a| (a as f64) > a_min).count();
    informative as f64 / total as f64
}

/// Presence values of one series along its slice axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZProfile {
    pub series_id: String,
    values: Vec<f64>,
    slice_world_z: Vec<f64>,
}

impl ZProfile {
    pub fn new(series_id: impl Into<String>, values: Vec<f64>, slice_world_z: Vec<f64>) -> Result<Self> {
        if values.len() != slice_world_z.len() {
            return Err(Error::InvalidParameter(format!(
                "{} presence values for {} slice positions",
                values.len(),
                slice_world_z.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("presence {bad} outside [0, 1]")));
        }
        let increasing = slice_world_z.windows(2).all(|w| w[1] > w[0]);
        let decreasing = slice_world_z.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::InvalidParameter(
                "slice world z positions are not strictly monotone".into(),
            ));
        }
        Ok(ZProfile {
            series_id: series_id.into(),
            values,
            slice_world_z,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice_world_z(&self) -> &[f64] {
        &self.slice_world_z
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(world_z, presence)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.slice_world_z.iter().copied().zip(self.values.iter().copied())
    }
}

/// Per-slice presence of `v`; `a_min` comes from the whole volume. Fails
/// when the slice axis has no superior-inferior component.
pub fn presence_profile(v: &Volume, p: &PresenceParams) -> Result<ZProfile> {
    let a_min = compute_a_min(v, p);
    let nz = v.grid().slice_count();
    let values = (0..nz).map(|z| slice_presence(v.slice(z), a_min)).collect();
    let zs = (0..nz).map(|z| v.grid().slice_world_z(z)).collect();
    ZProfile::new(v.series_id(), values, zs)
}

/// Binning of a presence heat map: world z on one axis, presence on the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapAxes {
    pub z_min: f64,
    pub z_max: f64,
    pub z_bins: usize,
    pub presence_bins: usize,
}

impl HeatmapAxes {
    pub fn new(z_min: f64, z_max: f64, z_bins: usize, presence_bins: usize) -> Result<Self> {
        if !(z_max > z_min) || z_bins == 0 || presence_bins == 0 {
            return Err(Error::InvalidParameter(format!(
                "heat map axes z [{z_min}, {z_max}] with {z_bins}x{presence_bins} bins"
            )));
        }
        Ok(HeatmapAxes {
            z_min,
            z_max,
            z_bins,
            presence_bins,
        })
    }

    /// One z bin per template slice, centred on the slice positions.
    pub fn for_template(template: &Grid, presence_bins: usize) -> Result<Self> {
        let nz = template.slice_count();
        let z0 = template.slice_world_z(0);
        let z1 = template.slice_world_z(nz - 1);
        let (lo, hi) = (z0.min(z1), z0.max(z1));
        let half = if nz > 1 { (hi - lo) / (nz - 1) as f64 / 2.0 } else { 0.5 };
        HeatmapAxes::new(lo - half, hi + half, nz, presence_bins)
    }

    fn z_bin(&self, z: f64) -> Option<usize> {
        if !(z >= self.z_min && z <= self.z_max) {
            return None;
        }
        let f = (z - self.z_min) / (self.z_max - self.z_min);
        Some(((f * self.z_bins as f64) as usize).min(self.z_bins - 1))
    }

    fn presence_bin(&self, presence: f64) -> usize {
        ((presence * self.presence_bins as f64) as usize).min(self.presence_bins - 1)
    }

    pub fn z_edges(&self) -> Vec<f64> {
        edges(self.z_min, self.z_max, self.z_bins)
    }

    pub fn presence_edges(&self) -> Vec<f64> {
        edges(0.0, 1.0, self.presence_bins)
    }
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Counts of (slice, series) observations per (z, presence) bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceHeatmap {
    pub axes: HeatmapAxes,
    /// `counts[z_bin][presence_bin]`.
    pub counts: Vec<Vec<u64>>,
    /// Observations whose z fell outside the axes.
    pub out_of_range: u64,
}

impl PresenceHeatmap {
    pub fn empty(axes: HeatmapAxes) -> Self {
        PresenceHeatmap {
            axes,
            counts: vec![vec![0; axes.presence_bins]; axes.z_bins],
            out_of_range: 0,
        }
    }

    pub fn add(&mut self, profile: &ZProfile) {
        for (z, presence) in profile.iter() {
            match self.axes.z_bin(z) {
                Some(zi) => self.counts[zi][self.axes.presence_bin(presence)] += 1,
                None => self.out_of_range += 1,
            }
        }
    }

    /// Adds another partial histogram over the same axes.
    pub fn merge(&mut self, other: &PresenceHeatmap) -> Result<()> {
        if self.axes != other.axes {
            return Err(Error::InvalidParameter("heat map axes differ".into()));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        self.out_of_range += other.out_of_range;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `ln(1 + count)` per bin, for plotting rare bins visibly.
    pub fn log_counts(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| (c as f64).ln_1p()).collect())
            .collect()
    }

    /// Rows are z bins, columns presence bins.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.counts {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "z_edges_mm": self.axes.z_edges(),
            "presence_edges": self.axes.presence_edges(),
            "rows": "z",
            "columns": "presence",
            "log_scale": true,
            "log_transform": "ln(1+count)",
            "total": self.total(),
            "out_of_range": self.out_of_range,
            "log_counts": self.log_counts(),
        })
    }
}

/// Heat map of `profiles`; an empty collection gives all-zero counts.
pub fn presence_heatmap<'a>(profiles: impl IntoIterator<Item = &'a ZProfile>, axes: HeatmapAxes) -> PresenceHeatmap {
    let mut map = PresenceHeatmap::empty(axes);
    for p in profiles {
        map.add(p);
    }
    map
}

/// `series_id,slice_index,world_z_mm,presence` rows.
pub fn write_profiles_csv<'a>(path: &Path, profiles: impl IntoIterator<Item = &'a ZProfile>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "series_id,slice_index,world_z_mm,presence").map_err(io)?;
    for p in profiles {
        for (i, (z, v)) in p.iter().enumerate() {
            writeln!(out, "{},{},{},{}", p.series_id, i, z, v).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}
