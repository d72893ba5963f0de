//! Thresholded mask superimposition for batch inspection.
//!
//! Each registered series is thresholded into a binary mask on the template
//! grid; up to `batch_size` masks are summed into a count volume. Which
//! members are set at a voxel is answered from bit-packed member masks, and
//! per-slice attribution lists are only materialised on request.

mod annotations;
mod store;

pub use annotations::{read_log, record_annotation, resolve_verdicts, AnnotationLog, AnnotationRecord, Verdict};
pub use store::{BatchManifest, BatchMember, DataDir};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid, Volume};

pub const DEFAULT_BATCH_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    /// HU; voxels strictly above are set.
    pub thresh: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams { thresh: 100.0 }
    }
}

pub fn binarize(registered: &Volume, p: &ThresholdParams) -> BinaryMask {
    let data = registered.data().mapv(|a| (a as f64) > p.thresh);
    BinaryMask::new(registered.series_id(), registered.grid().clone(), data).expect("mask shares the volume grid")
}

/// One bit per voxel, x fastest.
#[derive(Debug, Clone, PartialEq)]
struct PackedMask {
    words: Vec<u64>,
}

impl PackedMask {
    fn pack(mask: &BinaryMask) -> Self {
        let [nx, ny, nz] = mask.dims();
        let mut words = vec![0u64; (nx * ny * nz).div_ceil(64)];
        for ((x, y, z), &set) in mask.data().indexed_iter() {
            if set {
                let i = x + nx * (y + ny * z);
                words[i / 64] |= 1 << (i % 64);
            }
        }
        PackedMask { words }
    }

    fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }
}

#[derive(Debug, Clone)]
pub struct SuperimposedBatch {
    batch_id: String,
    grid: Grid,
    members: Vec<String>,
    count_volume: Array3<u16>,
    masks: Vec<PackedMask>,
}

/// Member indices set at each voxel of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAttribution {
    pub z: usize,
    /// `lists[[x, y]]` in member order.
    pub lists: Array2<Vec<u16>>,
}

/// Sums `masks` voxel-wise. Members keep the given order.
pub fn build_batch(batch_id: impl Into<String>, masks: &[BinaryMask], batch_size: usize) -> Result<SuperimposedBatch> {
    if batch_size == 0 || batch_size > u16::MAX as usize {
        return Err(Error::InvalidParameter(format!("batch size {batch_size}")));
    }
    if masks.len() > batch_size {
        return Err(Error::InvalidParameter(format!(
            "{} masks exceed batch size {batch_size}",
            masks.len()
        )));
    }
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidParameter("a batch needs at least one mask".into()))?;
    let grid = first.grid().clone();
    for m in &masks[1..] {
        m.grid()
            .check_matches(&grid, &format!("mask {}", m.source_series_id()))?;
    }
    let dims = grid.dims();
    let count_volume = masks
        .par_iter()
        .fold(
            || Array3::<u16>::zeros(dims),
            |mut acc, m| {
                acc.zip_mut_with(m.data(), |c, &b| *c += u16::from(b));
                acc
            },
        )
        .reduce(|| Array3::<u16>::zeros(dims), |a, b| a + b);
    let packed = masks.par_iter().map(PackedMask::pack).collect();
    Ok(SuperimposedBatch {
        batch_id: batch_id.into(),
        grid,
        members: masks.iter().map(|m| m.source_series_id().to_string()).collect(),
        count_volume,
        masks: packed,
    })
}

impl SuperimposedBatch {
    pub fn batch_id(&self) -> &str {
        &self.batch_id
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn count_volume(&self) -> &Array3<u16> {
        &self.count_volume
    }

    pub fn is_member(&self, series_id: &str) -> bool {
        self.members.iter().any(|m| m == series_id)
    }

    pub fn slice_counts(&self, z: usize) -> Result<ArrayView2<'_, u16>> {
        let [nx, ny, nz] = self.grid.dims();
        if z >= nz {
            return Err(Error::VoxelOutOfBounds {
                x: nx,
                y: ny,
                z,
                dims: self.grid.dims(),
            });
        }
        Ok(self.count_volume.index_axis(Axis(2), z))
    }

    fn linear(&self, x: usize, y: usize, z: usize) -> Result<usize> {
        let [nx, ny, _] = self.grid.dims();
        if !self.grid.contains(x, y, z) {
            return Err(Error::VoxelOutOfBounds {
                x,
                y,
                z,
                dims: self.grid.dims(),
            });
        }
        Ok(x + nx * (y + ny * z))
    }

    /// Members whose mask is set at the voxel, in member order.
    pub fn query_voxel(&self, x: usize, y: usize, z: usize) -> Result<Vec<&str>> {
        let i = self.linear(x, y, z)?;
        if self.count_volume[[x, y, z]] == 0 {
            return Ok(Vec::new());
        }
        Ok(self
            .masks
            .iter()
            .zip(&self.members)
            .filter(|(m, _)| m.get(i))
            .map(|(_, id)| id.as_str())
            .collect())
    }

    pub fn member_mask_at(&self, member: usize, x: usize, y: usize, z: usize) -> Result<bool> {
        let i = self.linear(x, y, z)?;
        self.masks
            .get(member)
            .map(|m| m.get(i))
            .ok_or_else(|| Error::InvalidParameter(format!("member index {member}")))
    }

    pub fn slice_attribution(&self, z: usize) -> Result<SliceAttribution> {
        let counts = self.slice_counts(z)?;
        let [nx, ny, _] = self.grid.dims();
        let mut lists = Array2::<Vec<u16>>::default((nx, ny));
        for ((x, y), list) in lists.indexed_iter_mut() {
            if counts[[x, y]] == 0 {
                continue;
            }
            let i = x + nx * (y + ny * z);
            list.extend(
                self.masks
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.get(i))
                    .map(|(k, _)| k as u16),
            );
        }
        Ok(SliceAttribution { z, lists })
    }
}
