//! Background-aware video moment retrieval at desk scale.
//!
//! Given an untrimmed video and a natural-language query, the model localizes
//! the temporal span the query describes. The pipeline fuses frame and query
//! features in a transformer encoder, scores every frame against the target
//! query and (during training) against a negative query sampled from the same
//! video, and decodes a fixed set of candidate moments from learnable spans.
//!
//! Everything runs on a small tape-based autodiff engine over dense `f64`
//! tensors, so the whole training stack is gradient-checkable and the test
//! suite can exercise it end to end on the bundled synthetic data generator.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod temporal;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
