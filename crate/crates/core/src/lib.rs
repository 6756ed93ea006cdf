// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token attribution for transformer encoders: LogAt and NormXLogit with
//! gradient baselines, a from-scratch micro-transformer to explain, and
//! faithfulness and evidence-alignment evaluation.
//!
//! ```
//! use nxl_core::attribution::{attribute, AttributionRequest, Method};
//! use nxl_core::model::{HeadSelection, InitOptions, ModelConfig, ModelSnapshot, Task, TokenSequence};
//!
//! let config = ModelConfig::new(1, 2, 8, 16, 10, 8, 2).unwrap();
//! let model = ModelSnapshot::random(config, HeadSelection::all(), 7, InitOptions::default()).unwrap();
//! let seq = TokenSequence::new(vec![0, 4, 5, 6], []).unwrap();
//! let result = attribute(&model, &seq, &AttributionRequest::new(Method::Normxlogit, Task::Classification)).unwrap();
//! assert_eq!(result.scores.len(), 4);
//! ```

pub mod attribution;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradients;
pub mod linalg;
pub mod model;

pub use error::{NxlError, Result};

/// Name recorded in every emitted file.
pub const TOOL: &str = "nxl";
/// Version recorded in every emitted file.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 (hex) of the compact JSON form of `value`.
pub fn hash_json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    model::sha256_hex(&serde_json::to_vec(value).expect("value serializes to JSON"))
}
