use nalgebra::Matrix4;
use ndarray::Array3;
use proptest::prelude::*;

use ctqc::volume::{classify_orientation, resample, AffineTransform, Grid, Interpolation, Volume};

fn volume(dims: [usize; 3], seed: u64) -> Volume {
    let grid = Grid::axis_aligned(dims, [1.5, 1.5, 3.0], [-4.0, 2.0, 7.0]).unwrap();
    let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, z)| {
        (((x * 31 + y * 17 + z * 7) as u64 ^ seed) % 997) as f32 - 300.0
    });
    Volume::new("v", grid, data).unwrap()
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [2usize..9, 2usize..9, 2usize..7]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_resample_is_bit_exact(d in dims(), seed in any::<u64>()) {
        let v = volume(d, seed);
        for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
            let r = resample(&v, &AffineTransform::identity(), v.grid(), interp, None);
            prop_assert_eq!(r.data(), v.data());
        }
    }

    #[test]
    fn integer_translation_round_trip(d in dims(), seed in any::<u64>(), shift in [-3i32..=3, -3i32..=3, -2i32..=2]) {
        let v = volume(d, seed);
        let s = v.grid().spacing();
        let t = AffineTransform::translation([0, 1, 2].map(|a| shift[a] as f64 * s[a]));
        let fill = -5000.0;
        let there = resample(&v, &t, v.grid(), Interpolation::Nearest, Some(fill));
        let back = resample(&there, &t.inverse(), v.grid(), Interpolation::Nearest, Some(fill));
        for ((x, y, z), &orig) in v.data().indexed_iter() {
            // the voxel survives when its forward image lands inside the grid
            let fwd = [x as i32 + shift[0], y as i32 + shift[1], z as i32 + shift[2]];
            let inside = (0..3).all(|a| fwd[a] >= 0 && fwd[a] < d[a] as i32);
            if inside {
                prop_assert_eq!(back.data()[[x, y, z]], orig);
            } else {
                prop_assert_eq!(back.data()[[x, y, z]], fill);
            }
        }
    }

    #[test]
    fn orientation_ignores_uniform_scaling(
        angles in [-1.2f64..1.2, -1.2f64..1.2, -1.2f64..1.2],
        scale in 0.1f64..20.0,
        perm in 0usize..6,
    ) {
        let (a, b, c) = (angles[0], angles[1], angles[2]);
        let rx = nalgebra::Rotation3::from_euler_angles(a, b, c);
        let mut m = Matrix4::identity();
        let cols = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
        for (j, &src) in cols.iter().enumerate() {
            for i in 0..3 {
                m[(i, j)] = rx[(i, src)];
            }
        }
        let mut scaled = m;
        for i in 0..3 {
            for j in 0..3 {
                scaled[(i, j)] *= scale;
            }
        }
        let data = Array3::zeros((3, 3, 3));
        let v1 = Volume::new("a", Grid::from_affine([3, 3, 3], m).unwrap(), data.clone()).unwrap();
        let v2 = Volume::new("b", Grid::from_affine([3, 3, 3], scaled).unwrap(), data).unwrap();
        prop_assert_eq!(classify_orientation(&v1), classify_orientation(&v2));
    }
}
