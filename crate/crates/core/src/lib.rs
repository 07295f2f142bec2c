//! Contextual flux: attention-derived, gated, cumulative updates to token
//! embeddings inside a minimal byte-level decoder-only transformer.
//!
//! Everything runs on a small reverse-mode autodiff engine over dense `f64`
//! tensors ([`tensor`]). The flux mechanism lives in [`flux`], the model in
//! [`model`], and the measurement battery in [`metrics`].

pub mod cli;
pub mod error;
pub mod flux;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
