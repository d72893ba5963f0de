//! Synthetic CT head phantom, matching template and ROI boxes.
//!
//! The phantom lives in a fixed world frame centred on the origin, so a
//! native series sampled from it is already aligned with the template and
//! an identity registration is exact up to resampling.

use nalgebra::{Matrix4, Point3};
use ndarray::Array3;

use crate::error::Result;
use crate::roi::{RoiDefinition, RoiId};
use crate::ssim::TemplateId;
use crate::volume::{BinaryMask, Grid, Volume};

pub const AIR_HU: f32 = -1024.0;
pub const BRAIN_HU: f32 = 30.0;
pub const CSF_HU: f32 = 5.0;
pub const BONE_HU: f32 = 1000.0;
pub const CALCIFICATION_HU: f32 = 400.0;

/// Ellipsoidal head: skull shell, brain, ventricles and small calcified
/// spots near the carotid siphons.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPhantom {
    pub semi_axes_mm: [f64; 3],
    pub skull_thickness_mm: f64,
    pub ventricle_semi_axes_mm: [f64; 3],
    pub ventricle_centre_mm: [f64; 3],
    pub calcifications_mm: Vec<[f64; 3]>,
    pub calcification_radius_mm: f64,
}

impl Default for HeadPhantom {
    fn default() -> Self {
        HeadPhantom {
            semi_axes_mm: [70.0, 85.0, 75.0],
            skull_thickness_mm: 7.0,
            ventricle_semi_axes_mm: [12.0, 25.0, 12.0],
            ventricle_centre_mm: [0.0, 0.0, 10.0],
            calcifications_mm: vec![[-14.0, 6.0, -22.0], [14.0, 6.0, -22.0]],
            calcification_radius_mm: 3.0,
        }
    }
}

fn scaled_norm(p: [f64; 3], centre: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| ((p[a] - centre[a]) / axes[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Air,
    Bone,
    Brain,
    Csf,
    Calcification,
}

impl HeadPhantom {
    /// Older heads get larger ventricles.
    pub fn for_template(id: TemplateId) -> Self {
        let mut p = HeadPhantom::default();
        if id == TemplateId::Older7580 {
            p.ventricle_semi_axes_mm = [15.0, 28.0, 14.0];
        }
        p
    }

    pub fn tissue_at(&self, p: [f64; 3]) -> Tissue {
        let r = scaled_norm(p, [0.0; 3], self.semi_axes_mm);
        if r > 1.0 {
            return Tissue::Air;
        }
        let inner = self.semi_axes_mm.map(|a| a - self.skull_thickness_mm);
        if scaled_norm(p, [0.0; 3], inner) > 1.0 {
            return Tissue::Bone;
        }
        let rc = self.calcification_radius_mm;
        if self
            .calcifications_mm
            .iter()
            .any(|c| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= rc * rc)
        {
            return Tissue::Calcification;
        }
        if scaled_norm(p, self.ventricle_centre_mm, self.ventricle_semi_axes_mm) <= 1.0 {
            return Tissue::Csf;
        }
        Tissue::Brain
    }

    pub fn hu_at(&self, p: [f64; 3]) -> f32 {
        match self.tissue_at(p) {
            Tissue::Air => AIR_HU,
            Tissue::Bone => BONE_HU,
            Tissue::Brain => BRAIN_HU,
            Tissue::Csf => CSF_HU,
            Tissue::Calcification => CALCIFICATION_HU,
        }
    }

    /// MRI-like template contrast: dark bone, bright brain.
    pub fn template_intensity_at(&self, p: [f64; 3]) -> f32 {
        match self.tissue_at(p) {
            Tissue::Air => 0.0,
            Tissue::Bone => 40.0,
            Tissue::Csf => 120.0,
            Tissue::Brain | Tissue::Calcification => 600.0,
        }
    }

    fn sample(&self, series_id: &str, grid: &Grid, f: impl Fn([f64; 3]) -> f32) -> Volume {
        let [nx, ny, nz] = grid.dims();
        let data = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            let w = grid.index_to_world([x as f64, y as f64, z as f64]);
            f([w.x, w.y, w.z])
        });
        Volume::new(series_id, grid.clone(), data).expect("shape matches grid")
    }

    /// CT series sampled at voxel centres.
    pub fn ct_volume(&self, series_id: &str, grid: &Grid) -> Volume {
        self.sample(series_id, grid, |p| self.hu_at(p))
    }

    pub fn template_volume(&self, id: TemplateId, grid: &Grid) -> Volume {
        self.sample(id.as_str(), grid, |p| self.template_intensity_at(p))
    }
}

/// 48×56×48 grid at 4 mm, centred on the origin.
pub fn template_grid() -> Grid {
    centred_grid([48, 56, 48], [4.0; 3], 0.0)
}

/// Axis-aligned grid centred on the origin in x and y and on `z_centre_mm`.
pub fn centred_grid(dims: [usize; 3], spacing: [f64; 3], z_centre_mm: f64) -> Grid {
    let origin = [0, 1, 2].map(|a| -((dims[a] - 1) as f64) * spacing[a] / 2.0);
    Grid::axis_aligned(dims, spacing, [origin[0], origin[1], origin[2] + z_centre_mm]).expect("valid grid")
}

/// Axial series covering world z in `[z_lo, z_hi]` mm.
pub fn axial_grid(in_plane: usize, pixel_mm: f64, slice_mm: f64, z_lo: f64, z_hi: f64) -> Grid {
    let nz = ((z_hi - z_lo) / slice_mm).floor() as usize + 1;
    let origin_xy = -((in_plane - 1) as f64) * pixel_mm / 2.0;
    Grid::axis_aligned(
        [in_plane, in_plane, nz],
        [pixel_mm, pixel_mm, slice_mm],
        [origin_xy, origin_xy, z_lo],
    )
    .expect("valid grid")
}

/// Grid whose slice axis runs along world y.
pub fn coronal_grid(in_plane: usize, pixel_mm: f64, slices: usize, slice_mm: f64) -> Grid {
    let h = |n: usize, s: f64| -((n - 1) as f64) * s / 2.0;
    #[rustfmt::skip]
    let m = Matrix4::new(
        pixel_mm, 0.0, 0.0, h(in_plane, pixel_mm),
        0.0, 0.0, slice_mm, h(slices, slice_mm),
        0.0, pixel_mm, 0.0, h(in_plane, pixel_mm),
        0.0, 0.0, 0.0, 1.0,
    );
    Grid::from_affine([in_plane, in_plane, slices], m).expect("valid grid")
}

/// Grid whose slice axis runs along world x.
pub fn sagittal_grid(in_plane: usize, pixel_mm: f64, slices: usize, slice_mm: f64) -> Grid {
    let h = |n: usize, s: f64| -((n - 1) as f64) * s / 2.0;
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, 0.0, slice_mm, h(slices, slice_mm),
        pixel_mm, 0.0, 0.0, h(in_plane, pixel_mm),
        0.0, pixel_mm, 0.0, h(in_plane, pixel_mm),
        0.0, 0.0, 0.0, 1.0,
    );
    Grid::from_affine([in_plane, in_plane, slices], m).expect("valid grid")
}

/// Axial grid tilted by `degrees` about the world x axis.
pub fn tilted_grid(in_plane: usize, pixel_mm: f64, slices: usize, slice_mm: f64, degrees: f64) -> Grid {
    let (s, c) = degrees.to_radians().sin_cos();
    let half = [in_plane, in_plane, slices]
        .iter()
        .zip([pixel_mm, pixel_mm, slice_mm])
        .map(|(&n, sp)| (n - 1) as f64 * sp / 2.0)
        .collect::<Vec<_>>();
    #[rustfmt::skip]
    let rot = Matrix4::new(
        1.0, 0.0, 0.0, 0.0,
        0.0, c, -s, 0.0,
        0.0, s, c, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    #[rustfmt::skip]
    let scale = Matrix4::new(
        pixel_mm, 0.0, 0.0, -half[0],
        0.0, pixel_mm, 0.0, -half[1],
        0.0, 0.0, slice_mm, -half[2],
        0.0, 0.0, 0.0, 1.0,
    );
    Grid::from_affine([in_plane, in_plane, slices], rot * scale).expect("valid grid")
}

/// World-space ROI boxes, `[lo, hi]` per axis in mm.
pub fn roi_box_mm(roi: RoiId) -> [[f64; 2]; 3] {
    match roi {
        RoiId::Vertebral => [[-12.0, 12.0], [-25.0, -5.0], [-60.0, -40.0]],
        RoiId::Basilar => [[-4.0, 4.0], [-15.0, -5.0], [-40.0, -20.0]],
        RoiId::CavernousIca => [[-20.0, 20.0], [0.0, 12.0], [-30.0, -15.0]],
        RoiId::LeftM1 => [[10.0, 40.0], [5.0, 15.0], [-15.0, -5.0]],
        RoiId::RightM1 => [[-40.0, -10.0], [5.0, 15.0], [-15.0, -5.0]],
    }
}

pub fn roi_mask(roi: RoiId, grid: &Grid) -> BinaryMask {
    let b = roi_box_mm(roi);
    let [nx, ny, nz] = grid.dims();
    let data = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        let w: Point3<f64> = grid.index_to_world([x as f64, y as f64, z as f64]);
        [w.x, w.y, w.z].iter().zip(b).all(|(&v, [lo, hi])| v >= lo && v <= hi)
    });
    BinaryMask::new(roi.as_str(), grid.clone(), data).expect("shape matches grid")
}

pub fn roi_set(template_id: TemplateId, grid: &Grid) -> Result<Vec<RoiDefinition>> {
    RoiId::ALL
        .into_iter()
        .map(|roi| RoiDefinition::new(roi, template_id, roi_mask(roi, grid)))
        .collect()
}

/// Volume whose every axial slice holds a disc of `radius_vox` voxels
/// centred in-plane.
pub fn cylinder_volume(series_id: &str, dims: [usize; 3], radius_vox: f64, inside: f32, outside: f32) -> Volume {
    let grid = Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).expect("valid grid");
    let cx = (dims[0] - 1) as f64 / 2.0;
    let cy = (dims[1] - 1) as f64 / 2.0;
    let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, _)| {
        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius_vox * radius_vox {
            inside
        } else {
            outside
        }
    });
    Volume::new(series_id, grid, data).expect("shape matches grid")
}
