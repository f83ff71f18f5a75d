use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training failed to converge: {0}")]
    NonConvergence(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("NaN gradient at iteration {iteration}")]
    NanGradient { iteration: usize },

    #[error("bundle is untrained: {0}")]
    UntrainedBundle(String),

    #[error("unknown protection method `{0}`")]
    UnknownMethod(String),

    #[error("inconsistent attack config: {0}")]
    InconsistentConfig(String),

    #[error("missing target image: method `{0}` requires a textural target")]
    MissingTarget(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("output directory {0} is not empty (use --force)")]
    OutputExists(PathBuf),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind, used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NonConvergence(_) => "non_convergence",
            Error::Divergence { .. } => "divergence",
            Error::NanGradient { .. } => "nan_gradient",
            Error::UntrainedBundle(_) => "untrained_bundle",
            Error::UnknownMethod(_) => "unknown_method",
            Error::InconsistentConfig(_) => "inconsistent_config",
            Error::MissingTarget(_) => "missing_target",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ResolutionMismatch(_) => "resolution_mismatch",
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::OutputExists(_) => "output_exists",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
