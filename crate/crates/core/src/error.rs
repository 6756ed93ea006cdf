// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Which task head an operation needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification,
    Regression,
    LanguageModel,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Classification => "classification",
            HeadKind::Regression => "regression",
            HeadKind::LanguageModel => "language-model",
        })
    }
}

#[derive(Debug, Error)]
pub enum NxlError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("model has no {0} head")]
    MissingHead(HeadKind),

    #[error("invalid index: {0}")]
    Index(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to load {what}: {reason}")]
    Load { what: String, reason: String },

    #[error("integrity check failed: stored hash {stored}, computed {computed}")]
    Integrity { stored: String, computed: String },

    #[error("unsupported model file version {0}")]
    UnknownVersion(u32),

    #[error("numeric error in layer {layer}, {op}: non-finite intermediate")]
    Numeric { layer: usize, op: &'static str },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("fixture training failed: {0}")]
    Fixture(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Fixture,
}

impl NxlError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            NxlError::Config(_) | NxlError::MissingHead(_) | NxlError::Index(_) => {
                ErrorCategory::Config
            }
            NxlError::NonFinite(_) | NxlError::Numeric { .. } | NxlError::UndefinedMetric(_) => {
                ErrorCategory::Numeric
            }
            NxlError::Fixture(_) => ErrorCategory::Fixture,
            NxlError::Shape(_)
            | NxlError::Vocabulary { .. }
            | NxlError::Protocol(_)
            | NxlError::Load { .. }
            | NxlError::Integrity { .. }
            | NxlError::UnknownVersion(_)
            | NxlError::Io { .. }
            | NxlError::Json(_) => ErrorCategory::Data,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 5 fixture.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Fixture => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NxlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = NxlError> = std::result::Result<T, E>;
