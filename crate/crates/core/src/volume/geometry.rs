use std::fmt;
use std::path::Path;

use nalgebra::{Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// A source-world to target-world affine map in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    /// Validates the bottom row and that the matrix round-trips through its
    /// inverse to within 1e-9 per element.
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularTransform);
        }
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::SingularTransform);
        }
        let inverse = matrix.try_inverse().ok_or(Error::SingularTransform)?;
        let residual = (matrix * inverse - Matrix4::identity()).abs().max();
        if !(residual <= 1e-9) {
            return Err(Error::SingularTransform);
        }
        Ok(AffineTransform { matrix })
    }

    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(offset: [f64; 3]) -> Self {
        AffineTransform {
            matrix: Matrix4::new_translation(&Vector3::from(offset)),
        }
    }

    /// Rotation by `degrees` about the world z axis through `centre`.
    pub fn rotation_z(degrees: f64, centre: [f64; 3]) -> Result<Self> {
        let c = Vector3::from(centre);
        let (s, co) = degrees.to_radians().sin_cos();
        #[rustfmt::skip]
        let rot = Matrix4::new(
            co, -s, 0.0, 0.0,
            s, co, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let m = Matrix4::new_translation(&c) * rot * Matrix4::new_translation(&-c);
        AffineTransform::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> AffineTransform {
        AffineTransform {
            matrix: self
                .matrix
                .try_inverse()
                .expect("invertibility is a construction invariant"),
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &AffineTransform) -> Result<AffineTransform> {
        AffineTransform::new(self.matrix * first.matrix)
    }

    pub fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        let v = self.matrix * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(v.x, v.y, v.z)
    }

    /// Parses sixteen whitespace-separated numbers, row-major.
    pub fn parse_text(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Registration(format!("bad matrix entry {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 16 {
            return Err(Error::Registration(format!(
                "expected 16 matrix entries, found {}",
                values.len()
            )));
        }
        AffineTransform::new(Matrix4::from_row_slice(&values))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AffineTransform::parse_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{}", self.matrix[(r, c)])).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Slice orientation of a series, from the direction of its third grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
    Oblique,
}

/// Minimum direction-cosine magnitude for a non-oblique class.
pub const ORIENTATION_COSINE_MIN: f64 = 0.9;

/// Axial when, of the three grid axes, the slice axis is the one best
/// aligned with world superior-inferior and its cosine is at least 0.9.
/// Coronal and sagittal use the anterior-posterior and left-right axes.
pub fn classify_orientation(v: &Volume) -> Orientation {
    let a = v.grid().affine();
    let cosine = |world_axis: usize, grid_axis: usize| {
        let col = a.fixed_view::<3, 1>(0, grid_axis);
        (col[world_axis] / col.norm()).abs()
    };
    for (world_axis, class) in [
        (2, Orientation::Axial),
        (1, Orientation::Coronal),
        (0, Orientation::Sagittal),
    ] {
        let slice_axis = cosine(world_axis, 2);
        let best_other = cosine(world_axis, 0).max(cosine(world_axis, 1));
        if slice_axis >= best_other && slice_axis >= ORIENTATION_COSINE_MIN {
            return class;
        }
    }
    Orientation::Oblique
}
