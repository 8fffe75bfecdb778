use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("crop size {size} exceeds image {height}x{width}")]
    CropTooLarge { size: usize, height: usize, width: usize },
    #[error("invalid {kind} level {level}: valid range is {range}")]
    InvalidLevel {
        kind: &'static str,
        level: f64,
        range: &'static str,
    },
    #[error("wavelet rate control did not converge to {target} dB after {iterations} iterations")]
    NonConvergent { target: f64, iterations: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing label raster for image(s): {}", .0.join(", "))]
    MissingLabel(Vec<String>),
    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unknown image id `{0}` in predictions")]
    UnknownImage(String),
    #[error("missing PSNR provenance for {0}")]
    MissingPsnr(String),
    #[error("grid mismatch, missing cells: {}", .0.join(", "))]
    GridMismatch(Vec<String>),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
