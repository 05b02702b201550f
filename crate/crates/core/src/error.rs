// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the concept-evolution stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A basis lost column rank (QR pivot below tolerance).
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    /// Non-finite values or a failed numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid or unknown configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Token ids or sequences outside the model's domain.
    #[error("input error: {0}")]
    Input(String),

    /// Operation not permitted in the current lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// References to concepts that are not live in the library.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Graph construction failure in the autodiff tape.
    #[error("construction error: {0}")]
    Construction(String),

    /// Checkpoint payload failed validation.
    #[error("integrity error in section `{section}`: {detail}")]
    Integrity { section: String, detail: String },

    /// Checkpoint written by an incompatible format version.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Integrity {
            section: section.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
