use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDataType(i16),

    #[error("expected a 3D image, found {0} non-unit dimensions")]
    NotThreeDimensional(usize),

    #[error("grid-to-world affine is singular")]
    SingularAffine,

    #[error("transform is singular or not affine")]
    SingularTransform,

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty valid region: {0}")]
    EmptyValidRegion(String),

    #[error("voxel ({x}, {y}, {z}) is outside grid {dims:?}")]
    VoxelOutOfBounds {
        x: usize,
        y: usize,
        z: usize,
        dims: [usize; 3],
    },

    #[error("series {series_id} is not a member of batch {batch_id}")]
    UnknownSeries { batch_id: String, series_id: String },

    #[error("missing ROI {0}")]
    MissingRoi(String),

    #[error("ROI {0} has an empty mask")]
    EmptyRoi(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ledger invariant violated: {0}")]
    Ledger(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
