use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
///
/// Variants map onto the CLI exit-code classes: `Input`, `Config`, `Parse`
/// and `Usage` are caller mistakes, `Dependency` means a required model or
/// artifact is missing, and `Divergence` means an optimization produced a
/// non-finite loss.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("optimization diverged at step {step}: {msg} (last finite total loss {last_total})")]
    Divergence {
        step: usize,
        msg: String,
        last_total: f64,
        last_latent: Vec<f64>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
