//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input sites violate the preconditions of diagram construction
    /// (coincident sites, sites outside the domain, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A vertex sensitivity formula hit its non-degeneracy tolerance.
    #[error("degenerate vertex: {0}")]
    DegenerateVertex(String),

    /// Inconsistent run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed input file.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
