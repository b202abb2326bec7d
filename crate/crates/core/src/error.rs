use thiserror::Error;

use crate::imgproc::QualityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid resize target {width}x{height} (minimum {min})")]
    InvalidTarget { width: u32, height: u32, min: u32 },

    #[error("feature extraction failed: {0}")]
    ExtractionFailed(String),

    #[error("descriptor kinds differ: query {query}, gallery {gallery}")]
    IncompatibleDescriptors { query: &'static str, gallery: &'static str },

    #[error("gallery feature set has {0} descriptors, need at least 2")]
    InsufficientGallery(usize),

    #[error("degenerate point sample")]
    DegenerateSample,

    #[error("image rejected by quality gate (mean luma {:.1}, sharpness {:.2})", .0.mean_luma, .0.sharpness)]
    RejectedLowQuality(QualityReport),

    #[error("gallery store error: {0}")]
    StoreError(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("no record with id {0}")]
    NotFound(String),

    #[error("manifest error: {0}")]
    ManifestError(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
