use std::io;

use thiserror::Error;

/// Every failure the library can report, grouped by category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("math error: {0}")]
    Math(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    /// Training produced a non-finite loss. The last state that completed a
    /// full epoch is kept so the caller can inspect or persist it.
    #[error("divergence at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: u64,
        reason: String,
        last_good: Option<Box<crate::model::TrainState>>,
    },
}

impl Error {
    /// Short category name used in CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format(_) => "FormatError",
            Error::Data(_) => "DataError",
            Error::Io(_) => "IoError",
            Error::Config(_) => "ConfigError",
            Error::Index(_) => "IndexError",
            Error::Math(_) => "MathError",
            Error::Shape(_) => "ShapeError",
            Error::State(_) => "StateError",
            Error::Divergence { .. } => "DivergenceError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
