use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("class directory {0} contains no decodable images")]
    EmptyClassDirectory(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("split ratios must sum to 1 (got {0})")]
    RatioSumInvalid(f64),
    #[error("class {class} has {count} items; at least 3 are needed to split")]
    SplitInfeasible { class: String, count: usize },
    #[error("class {0} has no training items")]
    EmptyTrainClass(String),
    #[error("invalid class registry: {0}")]
    InvalidRegistry(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("pretrained weights unavailable for {arch}: {reason}")]
    WeightsUnavailable { arch: String, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint has {checkpoint} classes but registry names {registry}")]
    RegistryMismatch { checkpoint: usize, registry: usize },
    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("input gradient unavailable: {0}")]
    GradientUnavailable(String),
    #[error("layer {0:?} not found")]
    LayerNotFound(String),
    #[error("occlusion patch {patch} larger than image side {side}")]
    PatchLargerThanImage { patch: usize, side: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
