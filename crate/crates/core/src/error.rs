use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// [`Error::kind`] gives a stable machine-readable category that the CLI
/// emits in its error report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("marker panel mismatch: {0}")]
    PanelMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stale artifact {}: produced by run {found}, current run is {expected}", path.display())]
    Stale {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("png: {0}")]
    Png(#[from] png::EncodingError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::NonFinite(_) => "non_finite",
            Error::Version { .. } => "version_mismatch",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Corrupt(_) => "corrupt_file",
            Error::PanelMismatch(_) => "panel_mismatch",
            Error::Contract(_) => "contract",
            Error::Generation(_) => "generation",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Stale { .. } => "stale_artifact",
            Error::Io(_) => "io",
            Error::Tiff(_) => "tiff",
            Error::Png(_) => "png",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}
