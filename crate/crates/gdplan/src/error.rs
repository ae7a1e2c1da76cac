use std::path::PathBuf;

/// Crate-wide error type.
///
/// Shape errors inside tensor ops are programming errors and panic with a
/// diagnostic instead; everything that can legitimately fail at run time
/// (I/O, file formats, diverging optimizations, bad configs) lands here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("gradient requested w.r.t. a tensor that does not require grad")]
    WrtNotDifferentiable,

    #[error("non-finite value while probing coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error("planning loss became non-finite at inner step {step}")]
    PlanDiverged { step: usize },

    #[error("outer loss non-finite for {consecutive} consecutive steps; aborting run")]
    TrainDiverged { consecutive: usize },

    #[error("consistency loss requested without a training context (observations)")]
    ConsistencyNeedsObservations,

    #[error("expert asked for an off-road pose (d_c = {d_c:.3} m)")]
    ExpertOffRoad { d_c: f64 },

    #[error("expert left the road during demonstration rollout (resample the start)")]
    ExpertRolloutLeftRoad,

    #[error("{path}: not a {expected} file (bad magic)")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: manifest/payload disagreement ({detail})")]
    ManifestMismatch { path: PathBuf, detail: String },

    #[error("checkpoint incompatible with requested evaluation: {detail}")]
    CheckpointMismatch { detail: String },

    #[error("evaluation produced an empty report")]
    EmptyReport,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
