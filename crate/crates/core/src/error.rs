use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report. The variant name doubles as the
/// category printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input-shape error: {0}")]
    Shape(String),

    #[error("label error: label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty-input error: {0}")]
    EmptyInput(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("divergence: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("stats error: {0}")]
    Stats(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error in {file} at line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("ingestion error for {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("experiment {context}: {source}")]
    Experiment {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-friendly category, used for the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Label { .. } => "label",
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty-input",
            Error::Range(_) => "range",
            Error::Divergence { .. } => "divergence",
            Error::Stats(_) => "stats",
            Error::Numeric(_) => "numeric",
            Error::Manifest(_) => "manifest",
            Error::Parse { .. } => "parse",
            Error::Ingestion { .. } => "ingestion",
            Error::Fold { source, .. } | Error::Experiment { source, .. } => source.category(),
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
