use serde::{Deserialize, Serialize};

use super::{SeriesMetadata, Volume};

/// Scout/localiser screening rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocaliserCriteria {
    /// Series with fewer slices are localisers.
    pub min_slices: usize,
    /// Ratio of the longer to the shorter in-plane field of view (mm) above
    /// which a series is a localiser.
    pub max_aspect_ratio: f64,
    /// Case-insensitive substrings of image-type tags marking a localiser.
    pub markers: Vec<String>,
}

impl Default for LocaliserCriteria {
    fn default() -> Self {
        LocaliserCriteria {
            min_slices: 5,
            max_aspect_ratio: 2.0,
            markers: ["LOCALIZER", "LOCALISER", "SCOUT", "TOPOGRAM", "SURVIEW"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl LocaliserCriteria {
    pub fn detect(&self, v: &Volume, meta: &SeriesMetadata) -> bool {
        let [nx, ny, nz] = v.dims();
        if nz < self.min_slices {
            return true;
        }
        let sp = v.grid().spacing();
        let fov_x = nx as f64 * sp[0];
        let fov_y = ny as f64 * sp[1];
        if fov_x.max(fov_y) / fov_x.min(fov_y) > self.max_aspect_ratio {
            return true;
        }
        meta.image_type.iter().chain(&meta.labels).any(|tag| {
            let tag = tag.to_ascii_uppercase();
            self.markers.iter().any(|m| tag.contains(&m.to_ascii_uppercase()))
        })
    }
}

/// [`LocaliserCriteria::detect`] with the default rules.
pub fn detect_localiser(v: &Volume, meta: &SeriesMetadata) -> bool {
    LocaliserCriteria::default().detect(v, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use ndarray::Array3;

    fn blank(dims: [usize; 3]) -> Volume {
        let grid = Grid::axis_aligned(dims, [0.5, 0.5, 5.0], [0.0; 3]).unwrap();
        Volume::new("s", grid, Array3::zeros(dims)).unwrap()
    }

    #[test]
    fn two_slices_is_localiser() {
        assert!(detect_localiser(&blank([512, 512, 2]), &SeriesMetadata::default()));
    }

    #[test]
    fn thirty_slice_head_is_not() {
        assert!(!detect_localiser(&blank([512, 512, 30]), &SeriesMetadata::default()));
    }

    #[test]
    fn metadata_marker_wins() {
        let meta = SeriesMetadata {
            image_type: vec!["ORIGINAL".into(), "PRIMARY".into(), "LOCALIZER".into()],
            ..Default::default()
        };
        assert!(detect_localiser(&blank([512, 512, 30]), &meta));
    }

    #[test]
    fn elongated_field_of_view() {
        assert!(detect_localiser(&blank([512, 200, 30]), &SeriesMetadata::default()));
        assert!(!detect_localiser(&blank([512, 256, 30]), &SeriesMetadata::default()));
    }
}
