//! Depth-sequence transformer pipeline for segment-specific carotid
//! calcification mapping: volume IO, deterministic hemisphere separation,
//! a reverse-mode autodiff tensor core, the DST model, objectives and
//! metrics, synthetic phantom data, and the training/evaluation harness.

pub mod error;
pub mod gradsuite;
pub mod hemisplit;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
