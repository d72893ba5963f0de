use nalgebra::{Matrix4, Vector4};
use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use super::{AffineTransform, BinaryMask, Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Trilinear,
}

/// Continuous coordinates closer than this to an integer are snapped to it,
/// so exact grid hits are not smeared by round-off.
const SNAP: f64 = 1e-6;

/// Target-index to source-index map for a source-world to target-world
/// transform.
fn index_map(source: &Grid, transform: &AffineTransform, target: &Grid) -> Matrix4<f64> {
    source.world_to_index() * transform.inverse().matrix() * target.affine()
}

fn map_point(m: &Matrix4<f64>, i: usize, j: usize, k: usize) -> [f64; 3] {
    let p = m * Vector4::new(i as f64, j as f64, k as f64, 1.0);
    [p.x, p.y, p.z].map(|c| {
        let r = c.round();
        if (c - r).abs() < SNAP {
            r
        } else {
            c
        }
    })
}

fn nearest_index(p: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

fn trilinear(data: &Array3<f32>, p: [f64; 3], dims: [usize; 3]) -> Option<f32> {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
            return None;
        }
        let f = p[a].floor();
        base[a] = f as usize;
        frac[a] = p[a] - f;
    }
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let upper = (corner >> a) & 1 == 1;
            if upper {
                w *= frac[a];
                idx[a] = (base[a] + 1).min(dims[a] - 1);
            } else {
                w *= 1.0 - frac[a];
                idx[a] = base[a];
            }
        }
        if w != 0.0 {
            acc += w * data[idx] as f64;
        }
    }
    Some(acc as f32)
}

/// Samples `v` onto `target`. `transform` maps source world to target world;
/// each target voxel reads the source at the inverse-mapped point. Points
/// outside the source field get `fill`, which defaults to the source minimum.
pub fn resample(
    v: &Volume,
    transform: &AffineTransform,
    target: &Grid,
    interp: Interpolation,
    fill: Option<f32>,
) -> Volume {
    let fill = fill.unwrap_or_else(|| v.finite_range().map(|(lo, _)| lo).unwrap_or(0.0));
    let m = index_map(v.grid(), transform, target);
    let dims = v.dims();
    let src = v.data();
    let mut out = Array3::<f32>::zeros(target.dims());
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        let p = map_point(&m, i, j, k);
        *o = match interp {
            Interpolation::Nearest => nearest_index(p, dims).map(|idx| src[idx]),
            Interpolation::Trilinear => trilinear(src, p, dims),
        }
        .unwrap_or(fill);
    });
    Volume::new(v.series_id().to_string(), target.clone(), out).expect("output shape follows the target grid")
}

/// Nearest-neighbour mask resampling; out-of-field voxels are unset.
pub fn resample_mask(m: &BinaryMask, transform: &AffineTransform, target: &Grid) -> BinaryMask {
    let map = index_map(m.grid(), transform, target);
    let dims = m.dims();
    let src = m.data();
    let mut out = Array3::<bool>::default(target.dims());
    Zip::indexed(&mut out).par_for_each(|(i, j, k), o| {
        *o = nearest_index(map_point(&map, i, j, k), dims).is_some_and(|idx| src[idx]);
    });
    BinaryMask::new(m.source_series_id().to_string(), target.clone(), out)
        .expect("output shape follows the target grid")
}

/// Pull-back lookup used by ROI coverage for lattice points outside any grid:
/// source voxel that target index `(i, j, k)` (possibly negative) reads.
pub(crate) fn pull_back(
    source: &Grid,
    transform: &AffineTransform,
    target: &Grid,
) -> impl Fn(i64, i64, i64) -> Option<[usize; 3]> {
    let m = index_map(source, transform, target);
    let dims = source.dims();
    move |i, j, k| {
        let p = m * Vector4::new(i as f64, j as f64, k as f64, 1.0);
        nearest_index([p.x, p.y, p.z], dims)
    }
}

/// Continuous target index of source voxel `index`.
pub(crate) fn push_forward(source: &Grid, transform: &AffineTransform, target: &Grid) -> impl Fn([f64; 3]) -> [f64; 3] {
    let m = target.world_to_index() * transform.matrix() * source.affine();
    move |idx| {
        let p = m * Vector4::new(idx[0], idx[1], idx[2], 1.0);
        [p.x, p.y, p.z]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let grid = Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap();
        let data = Array3::from_shape_fn(dims, |(x, y, z)| (x + 10 * y + 100 * z) as f32);
        Volume::new("ramp", grid, data).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let v = ramp([5, 4, 3]);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            let out = resample(&v, &AffineTransform::identity(), v.grid(), interp, None);
            assert_eq!(out.data(), v.data());
        }
    }

    #[test]
    fn one_voxel_shift_matches_shift_oracle() {
        let v = ramp([5, 4, 3]);
        let t = AffineTransform::translation([1.0, 0.0, 0.0]);
        let out = resample(&v, &t, v.grid(), Interpolation::Nearest, Some(-1.0));
        for ((x, y, z), &got) in out.data().indexed_iter() {
            let want = if x == 0 { -1.0 } else { v.data()[[x - 1, y, z]] };
            assert_eq!(got, want, "at {x},{y},{z}");
        }
    }

    #[test]
    fn default_fill_is_source_minimum() {
        let v = ramp([3, 3, 3]).map(|x| x + 5.0);
        let t = AffineTransform::translation([10.0, 0.0, 0.0]);
        let out = resample(&v, &t, v.grid(), Interpolation::Nearest, None);
        assert!(out.data().iter().all(|&x| x == 5.0));
    }

    #[test]
    fn trilinear_midpoint_averages() {
        let v = ramp([3, 1, 1]);
        let t = AffineTransform::translation([-0.5, 0.0, 0.0]);
        let target = Grid::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let out = resample(&v, &t, &target, Interpolation::Trilinear, None);
        assert_eq!(out.data()[[0, 0, 0]], 0.5);
        assert_eq!(out.data()[[1, 0, 0]], 1.5);
    }

    #[test]
    fn upsampling_onto_finer_grid() {
        let v = ramp([3, 1, 1]);
        let target = Grid::axis_aligned([5, 1, 1], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let out = resample(
            &v,
            &AffineTransform::identity(),
            &target,
            Interpolation::Trilinear,
            None,
        );
        let got: Vec<f32> = out.data().iter().copied().collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }
}
