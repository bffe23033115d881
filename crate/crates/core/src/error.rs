use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. `kind()` gives a stable machine-readable code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("duplicate point id `{0}`")]
    DuplicateId(String),
    #[error("point `{0}` has a zero vector and cannot be normalized")]
    ZeroVector(String),
    #[error("unknown point id `{0}`")]
    UnknownId(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("unknown set `{0}`")]
    UnknownSet(String),
    #[error("k = {k} exceeds the {available} eligible neighbors")]
    KTooLarge { k: usize, available: usize },
    #[error("concept `{concept}` needs {requested} images but only {available} exist")]
    InsufficientImages {
        concept: String,
        requested: usize,
        available: usize,
    },
    #[error("need at least {required} points per modality, found {found} ({modality})")]
    TooFewPoints {
        required: usize,
        found: usize,
        modality: String,
    },
    #[error("layout has no coordinates for point `{0}`")]
    MissingPoint(String),
    #[error("projected cross-modal distances have zero norm")]
    ZeroProjectedNorm,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("matrix is not a valid distance matrix: {0}")]
    InvalidDistanceMatrix(String),
    #[error("trustworthiness normalizer 2N-3k-1 is non-positive (N = {n}, k = {k})")]
    NormalizerNonpositive { n: usize, k: usize },
    #[error("set `{set}` has {size} members; at least {required} are required")]
    SetTooSmall {
        set: String,
        size: usize,
        required: usize,
    },
    #[error("density input is empty")]
    EmptyInput,
    #[error("weight {index} is not finite")]
    NonFiniteWeight { index: usize },
    #[error("contour level {level} is outside the field range ({min}, {max})")]
    LevelOutOfRange { level: f64, min: f64, max: f64 },
    #[error("set `{0}` is empty")]
    EmptySet(String),
    #[error("degenerate directive: {0}")]
    DegenerateDirective(String),
    #[error("weighted embedding sums to zero")]
    ZeroResultant,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("operation cancelled")]
    Cancelled,
    #[error("binary vector file {path}: {reason}")]
    BinaryFormat { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedManifest(_) => "MalformedManifest",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DuplicateId(_) => "DuplicateId",
            Error::ZeroVector(_) => "ZeroVector",
            Error::UnknownId(_) => "UnknownId",
            Error::UnknownConcept(_) => "UnknownConcept",
            Error::UnknownSet(_) => "UnknownSet",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::InsufficientImages { .. } => "InsufficientImages",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::MissingPoint(_) => "MissingPoint",
            Error::ZeroProjectedNorm => "ZeroProjectedNorm",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidDistanceMatrix(_) => "InvalidDistanceMatrix",
            Error::NormalizerNonpositive { .. } => "NormalizerNonpositive",
            Error::SetTooSmall { .. } => "SetTooSmall",
            Error::EmptyInput => "EmptyInput",
            Error::NonFiniteWeight { .. } => "NonFiniteWeight",
            Error::LevelOutOfRange { .. } => "LevelOutOfRange",
            Error::EmptySet(_) => "EmptySet",
            Error::DegenerateDirective(_) => "DegenerateDirective",
            Error::ZeroResultant => "ZeroResultant",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Cancelled => "Cancelled",
            Error::BinaryFormat { .. } => "BinaryFormat",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
