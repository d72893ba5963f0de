//! Artery regions of interest: template-space definitions, transfer into a
//! series' native grid, and the half-volume retention rule.
//!
//! Coverage is measured against the ROI's whole transferred volume, including
//! the part that lands outside the native grid, so a series that clips an
//! ROI is credited only with the portion it actually acquired.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presence::{compute_a_min, PresenceParams};
use crate::ssim::TemplateId;
use crate::volume::{
    load_mask, pull_back, push_forward, resample_mask, save_mask, AffineTransform, BinaryMask, Grid, Volume,
};

/// A series is retained when it holds at least this fraction of one ROI.
pub const RETENTION_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiId {
    CavernousIca,
    LeftM1,
    RightM1,
    Basilar,
    Vertebral,
}

impl RoiId {
    pub const ALL: [RoiId; 5] = [
        RoiId::CavernousIca,
        RoiId::LeftM1,
        RoiId::RightM1,
        RoiId::Basilar,
        RoiId::Vertebral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoiId::CavernousIca => "cavernous_ica",
            RoiId::LeftM1 => "left_m1",
            RoiId::RightM1 => "right_m1",
            RoiId::Basilar => "basilar",
            RoiId::Vertebral => "vertebral",
        }
    }
}

impl fmt::Display for RoiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoiId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoiId::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ROI {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct RoiDefinition {
    pub roi_id: RoiId,
    pub template_id: TemplateId,
    mask: BinaryMask,
}

impl RoiDefinition {
    pub fn new(roi_id: RoiId, template_id: TemplateId, mask: BinaryMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyRoi(format!("{roi_id}/{template_id}")));
        }
        Ok(RoiDefinition {
            roi_id,
            template_id,
            mask,
        })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// `<roi_id>_<template_id>.nii.gz`
pub fn roi_file_name(roi_id: RoiId, template_id: TemplateId) -> String {
    format!("{roi_id}_{template_id}.nii.gz")
}

fn roi_path(dir: &Path, roi_id: RoiId, template_id: TemplateId) -> Option<PathBuf> {
    let gz = dir.join(roi_file_name(roi_id, template_id));
    if gz.exists() {
        return Some(gz);
    }
    let plain = gz.with_extension("");
    plain.exists().then_some(plain)
}

/// Loads all five ROIs of a template and checks them against its grid.
pub fn load_roi_set(dir: &Path, template_id: TemplateId, template_grid: &Grid) -> Result<Vec<RoiDefinition>> {
    RoiId::ALL
        .into_iter()
        .map(|roi_id| {
            let path = roi_path(dir, roi_id, template_id)
                .ok_or_else(|| Error::MissingRoi(format!("{roi_id} for {template_id} in {}", dir.display())))?;
            let mask = load_mask(&path)?;
            mask.grid()
                .check_matches(template_grid, &format!("ROI {roi_id} vs template {template_id}"))?;
            let mask = BinaryMask::new(roi_id.as_str(), template_grid.clone(), mask.data().clone())?;
            RoiDefinition::new(roi_id, template_id, mask)
        })
        .collect()
}

pub fn save_roi_set(dir: &Path, rois: &[RoiDefinition]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for roi in rois {
        save_mask(&dir.join(roi_file_name(roi.roi_id, roi.template_id)), &roi.mask)?;
    }
    Ok(())
}

/// An ROI on a native grid, plus the size of its transferred footprint on
/// the unbounded native lattice.
#[derive(Debug, Clone)]
pub struct TransferredRoi {
    pub roi_id: RoiId,
    pub mask: BinaryMask,
    pub total_voxels: usize,
}

/// Pulls the ROI back through the inverse of a native-to-template
/// registration, nearest neighbour, onto `native_grid`.
pub fn transfer_roi(roi: &RoiDefinition, registration: &AffineTransform, native_grid: &Grid) -> TransferredRoi {
    let to_native = registration.inverse();
    let template_grid = roi.mask.grid();
    let mask = resample_mask(&roi.mask, &to_native, native_grid);

    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((x, y, z), &set) in roi.mask.data().indexed_iter() {
        if set {
            for (a, v) in [x, y, z].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    let forward = push_forward(template_grid, &to_native, native_grid);
    let mut nlo = [f64::INFINITY; 3];
    let mut nhi = [f64::NEG_INFINITY; 3];
    for corner in 0..8usize {
        let idx = [0, 1, 2].map(|a| {
            if (corner >> a) & 1 == 1 {
                hi[a] as f64 + 1.0
            } else {
                lo[a] as f64 - 1.0
            }
        });
        let p = forward(idx);
        for a in 0..3 {
            nlo[a] = nlo[a].min(p[a]);
            nhi[a] = nhi[a].max(p[a]);
        }
    }
    let back = pull_back(template_grid, &to_native, native_grid);
    let range = |a: usize| (nlo[a].floor() as i64 - 1)..=(nhi[a].ceil() as i64 + 1);
    let mut total = 0usize;
    for k in range(2) {
        for j in range(1) {
            for i in range(0) {
                if back(i, j, k).is_some_and(|idx| roi.mask.data()[idx]) {
                    total += 1;
                }
            }
        }
    }
    TransferredRoi {
        roi_id: roi.roi_id,
        mask,
        total_voxels: total,
    }
}

/// Which transferred ROI voxels count as covered.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CoverageMode {
    /// Inside the series' acquired grid.
    #[default]
    Extent,
    /// Inside the grid and above the series' informative-voxel threshold.
    Presence { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiCoverage {
    pub series_id: String,
    pub roi_id: RoiId,
    pub covered_fraction: f64,
    pub retained: bool,
}

pub fn roi_coverage(roi: &TransferredRoi, series: &Volume, mode: CoverageMode) -> Result<RoiCoverage> {
    roi.mask.grid().check_matches(
        series.grid(),
        &format!("ROI {} vs series {}", roi.roi_id, series.series_id()),
    )?;
    let covered = match mode {
        CoverageMode::Extent => roi.mask.count(),
        CoverageMode::Presence { tolerance } => {
            let a_min = compute_a_min(series, &PresenceParams::new(tolerance)?);
            roi.mask
                .data()
                .iter()
                .zip(series.data().iter())
                .filter(|(&set, &a)| set && (a as f64) > a_min)
                .count()
        }
    };
    let covered_fraction = if roi.total_voxels == 0 {
        0.0
    } else {
        (covered as f64 / roi.total_voxels as f64).min(1.0)
    };
    Ok(RoiCoverage {
        series_id: series.series_id().to_string(),
        roi_id: roi.roi_id,
        covered_fraction,
        retained: roi.total_voxels > 0 && covered_fraction >= RETENTION_MIN,
    })
}

/// A series survives when any of its ROIs is retained.
pub fn series_retained(coverages: &[RoiCoverage]) -> bool {
    coverages.iter().any(|c| c.retained)
}

/// `series_id,roi_id,covered_fraction,retained` rows.
pub fn write_coverage_csv<'a>(path: &Path, rows: impl IntoIterator<Item = &'a RoiCoverage>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "roi_id", "covered_fraction", "retained"])?;
    for c in rows {
        w.write_record([
            c.series_id.clone(),
            c.roi_id.to_string(),
            format!("{:.6}", c.covered_fraction),
            c.retained.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    /// ROI occupying slices 10..20 of a 30-slice template.
    fn slab_roi() -> RoiDefinition {
        let g = grid([8, 8, 30]);
        let data = Array3::from_shape_fn((8, 8, 30), |(x, y, z)| {
            (2..6).contains(&x) && (2..6).contains(&y) && (10..20).contains(&z)
        });
        RoiDefinition::new(
            RoiId::Basilar,
            TemplateId::Younger6570,
            BinaryMask::new("basilar", g, data).unwrap(),
        )
        .unwrap()
    }

    /// Native series covering template slices `z0..z1` under identity registration.
    fn native(z0: usize, z1: usize) -> Volume {
        let g = Grid::axis_aligned([8, 8, z1 - z0], [1.0; 3], [0.0, 0.0, z0 as f64]).unwrap();
        Volume::new("n", g, Array3::from_elem((8, 8, z1 - z0), 40.0)).unwrap()
    }

    fn coverage(z0: usize, z1: usize) -> RoiCoverage {
        let roi = slab_roi();
        let n = native(z0, z1);
        let t = transfer_roi(&roi, &AffineTransform::identity(), n.grid());
        assert_eq!(t.total_voxels, roi.mask().count());
        roi_coverage(&t, &n, CoverageMode::Extent).unwrap()
    }

    #[test]
    fn fully_inside() {
        let c = coverage(0, 30);
        assert_eq!(c.covered_fraction, 1.0);
        assert!(c.retained);
    }

    #[test]
    fn half_is_retained_forty_percent_is_not() {
        let half = coverage(15, 30);
        assert_eq!(half.covered_fraction, 0.5);
        assert!(half.retained);
        let forty = coverage(16, 30);
        assert_eq!(forty.covered_fraction, 0.4);
        assert!(!forty.retained);
    }

    #[test]
    fn coverage_grows_with_extent() {
        let fractions: Vec<f64> = (10..=20).map(|z1| coverage(0, z1).covered_fraction).collect();
        assert!(fractions.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(fractions[0], 0.0);
        assert_eq!(fractions[10], 1.0);
    }

    #[test]
    fn disjoint_series_covers_nothing() {
        let c = coverage(22, 30);
        assert_eq!(c.covered_fraction, 0.0);
        assert!(!series_retained(&[c]));
    }

    #[test]
    fn presence_mode_ignores_air() {
        let roi = slab_roi();
        let mut n = native(0, 30);
        let mut data = n.data().clone();
        data.slice_mut(ndarray::s![.., .., 15..]).fill(-1000.0);
        n = Volume::new("n", n.grid().clone(), data).unwrap();
        let t = transfer_roi(&roi, &AffineTransform::identity(), n.grid());
        let c = roi_coverage(&t, &n, CoverageMode::Presence { tolerance: 0.05 }).unwrap();
        assert_eq!(c.covered_fraction, 0.5);
        assert_eq!(
            roi_coverage(&t, &n, CoverageMode::Extent).unwrap().covered_fraction,
            1.0
        );
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let roi = slab_roi();
        let t = transfer_roi(&roi, &AffineTransform::identity(), &grid([8, 8, 30]));
        assert!(roi_coverage(&t, &native(0, 20), CoverageMode::Extent).is_err());
    }

    #[test]
    fn empty_mask_rejected() {
        let g = grid([2, 2, 2]);
        let m = BinaryMask::new("x", g, Array3::from_elem((2, 2, 2), false)).unwrap();
        assert!(matches!(
            RoiDefinition::new(RoiId::LeftM1, TemplateId::Older7580, m),
            Err(Error::EmptyRoi(_))
        ));
    }

    #[test]
    fn file_names() {
        assert_eq!(
            roi_file_name(RoiId::CavernousIca, TemplateId::Younger6570),
            "cavernous_ica_younger_65_70.nii.gz"
        );
    }
}
