//! Volumes, masks, grid geometry and NIfTI-1 I/O.
//!
//! Every array in this crate is indexed `[x, y, z]` with `z` the slice axis.
//! Grids carry a grid-to-world affine in millimetres (RAS+ world axes, the
//! NIfTI convention).

mod geometry;
mod nifti;
mod resample;
mod screening;
mod sidecar;

pub use geometry::{classify_orientation, AffineTransform, Orientation, ORIENTATION_COSINE_MIN};
pub use nifti::{load_mask, load_volume, read_nifti, save_counts, save_mask, save_volume, NiftiData};
pub(crate) use resample::{pull_back, push_forward};
pub use resample::{resample, resample_mask, Interpolation};
pub use screening::{detect_localiser, LocaliserCriteria};
pub use sidecar::{load_sidecar, sidecar_path, SeriesMetadata};

use nalgebra::{Matrix3, Matrix4, Point3, Vector4};
use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Voxel lattice of a volume: extent, voxel size and grid-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero extent in dims {dims:?}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularAffine);
        }
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into_owned();
        if linear.determinant() == 0.0 || linear.try_inverse().is_none() {
            return Err(Error::SingularAffine);
        }
        Ok(Grid { dims, spacing, affine })
    }

    /// Grid whose spacing is read off the affine's column norms.
    pub fn from_affine(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        let spacing = [0, 1, 2].map(|c| affine.fixed_view::<3, 1>(0, c).norm());
        Grid::new(dims, spacing, affine)
    }

    /// Axis-aligned grid with the given spacing and world origin at voxel 0.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Grid::new(dims, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slice_count(&self) -> usize {
        self.dims[2]
    }

    pub fn index_to_world(&self, index: [f64; 3]) -> Point3<f64> {
        let p = self.affine * Vector4::new(index[0], index[1], index[2], 1.0);
        Point3::new(p.x, p.y, p.z)
    }

    /// World-to-grid matrix. Cannot fail: the affine was checked at construction.
    pub fn world_to_index(&self) -> Matrix4<f64> {
        self.affine
            .try_inverse()
            .expect("grid affine invertibility is a construction invariant")
    }

    /// World z (mm) of the in-plane centre of slice `k`.
    pub fn slice_world_z(&self, k: usize) -> f64 {
        let cx = (self.dims[0] as f64 - 1.0) / 2.0;
        let cy = (self.dims[1] as f64 - 1.0) / 2.0;
        self.index_to_world([cx, cy, k as f64]).z
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x < self.dims[0] && y < self.dims[1] && z < self.dims[2]
    }

    /// Same extent and affine to within `tol` per element.
    pub fn matches(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())))
    }

    pub(crate) fn check_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other, 1e-4) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    pub(crate) fn check_shape<T>(&self, data: &Array3<T>) -> Result<()> {
        if data.shape() != self.dims {
            return Err(Error::InvalidVolume(format!(
                "data extent {:?} does not match dims {:?}",
                data.shape(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// A CT series (or template) as attenuation values on a grid.
#[derive(Debug, Clone)]
pub struct Volume {
    series_id: String,
    grid: Grid,
    data: Array3<f32>,
}

impl Volume {
    pub fn new(series_id: impl Into<String>, grid: Grid, data: Array3<f32>) -> Result<Self> {
        grid.check_shape(&data)?;
        Ok(Volume {
            series_id: series_id.into(),
            grid,
            data,
        })
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn with_series_id(mut self, series_id: impl Into<String>) -> Self {
        self.series_id = series_id.into();
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), z)
    }

    /// Minimum and maximum over finite values, `None` if there are none.
    pub fn finite_range(&self) -> Option<(f32, f32)> {
        self.data
            .iter()
            .filter(|v| v.is_finite())
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Apply `f` to every value, keeping the grid.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            series_id: self.series_id.clone(),
            grid: self.grid.clone(),
            data: self.data.mapv(f),
        }
    }
}

/// Boolean voxel mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    source_series_id: String,
    grid: Grid,
    data: Array3<bool>,
}

impl BinaryMask {
    pub fn new(source_series_id: impl Into<String>, grid: Grid, data: Array3<bool>) -> Result<Self> {
        grid.check_shape(&data)?;
        Ok(BinaryMask {
            source_series_id: source_series_id.into(),
            grid,
            data,
        })
    }

    pub fn source_series_id(&self) -> &str {
        &self.source_series_id
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[[x, y, z]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_geometry() {
        let eye = Matrix4::identity();
        assert!(Grid::new([0, 4, 4], [1.0; 3], eye).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, -1.0, 1.0], eye).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, f64::NAN, 1.0], eye).is_err());
        let mut flat = eye;
        flat[(2, 2)] = 0.0;
        assert!(matches!(
            Grid::new([4, 4, 4], [1.0; 3], flat),
            Err(Error::SingularAffine)
        ));
    }

    #[test]
    fn volume_requires_matching_extent() {
        let grid = Grid::axis_aligned([4, 5, 6], [1.0; 3], [0.0; 3]).unwrap();
        assert!(Volume::new("s", grid.clone(), Array3::zeros((4, 5, 6))).is_ok());
        assert!(Volume::new("s", grid, Array3::zeros((4, 6, 5))).is_err());
    }

    #[test]
    fn slice_world_z_follows_affine() {
        let grid = Grid::axis_aligned([3, 3, 4], [1.0, 1.0, 2.5], [0.0, 0.0, -10.0]).unwrap();
        assert_eq!(grid.slice_world_z(0), -10.0);
        assert_eq!(grid.slice_world_z(3), -2.5);
    }

    #[test]
    fn finite_range_skips_nan() {
        let grid = Grid::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut data = Array3::zeros((2, 1, 1));
        data[[0, 0, 0]] = f32::NAN;
        data[[1, 0, 0]] = 7.0;
        let v = Volume::new("s", grid, data).unwrap();
        assert_eq!(v.finite_range(), Some((7.0, 7.0)));
    }
}
