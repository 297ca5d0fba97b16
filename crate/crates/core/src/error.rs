//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// All ids carried by error variants are 1-based, matching the
/// config/table/plan file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid deployment plan: {0}")]
    Plan(String),

    #[error("missing latency table entry: layer {layer}, device {device}, candidate {candidate}")]
    MissingExecEntry {
        layer: usize,
        device: usize,
        candidate: usize,
    },

    #[error("missing latency table entry: comm for layer {layer}, device {device}")]
    MissingCommEntry { layer: usize, device: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
