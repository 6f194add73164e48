use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {msg}")]
    MalformedFile { path: PathBuf, msg: String },
    #[error("point {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBoundsPoint {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("person {index} failed to project into frame after {retries} retries")]
    DegenerateProjection { index: usize, retries: usize },
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("no row in the dataset exceeds the effective-density threshold")]
    NoEffectiveRows,
    #[error("d_min == d_max == {0}: the linear sigma map is undefined")]
    DegenerateStats(f64),
    #[error("sigma profile has {profile_rows} rows but the image has {image_rows}")]
    ProfileMismatch {
        profile_rows: usize,
        image_rows: usize,
    },
    #[error("dimensions {height}x{width} are not divisible by pooling factor {factor}")]
    IndivisibleDimensions {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad file format: {0}")]
    FormatMismatch(String),
    #[error("missing stage targets for image {0}")]
    MissingTargets(String),
    #[error("empty evaluation record set")]
    EmptyRecords,
    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
