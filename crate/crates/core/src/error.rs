use thiserror::Error;

/// Errors produced by the analysis core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("unsupported pixel format: {0}")]
    UnsupportedFormat(String),
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("encode failed: {0}")]
    Encode(String),
    #[error("region {x},{y} {w}x{h} is outside the {width}x{height} image")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("degenerate template: zero variance")]
    DegenerateTemplate,
    #[error("search band lies outside the image")]
    OutOfView,
    #[error("segmentation produced no component of at least {min_px} px")]
    SegmentationEmpty { min_px: usize },
    #[error("degenerate mask: {0} foreground px, at least 5 required")]
    DegenerateMask(usize),
    #[error("backend conflict: {0}")]
    BackendConflict(String),
    #[error("invalid backend descriptor: {0}")]
    InvalidBackend(String),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("unknown backend: {0}")]
    UnknownBackend(String),
    #[error("invalid input format: {0}")]
    Format(String),
    #[error("classification failed: {0}")]
    ClassificationFailed(String),
    #[error("insufficient vessels: {0}")]
    InsufficientVessels(String),
    #[error("roi too small: side {0} px, at least 10 required")]
    RoiTooSmall(u32),
    #[error("{0} is undefined for an empty denominator")]
    Undefined(&'static str),
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("invalid probability vector for {0}")]
    InvalidProbabilities(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("report has no sections")]
    EmptyReport,
    #[error("invalid report state: {0}")]
    ReportState(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Decode(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
