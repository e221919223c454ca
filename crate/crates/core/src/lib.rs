//! Task-expert decomposition for a small transformer encoder.
//!
//! The pipeline prompt-tunes a frozen encoder for a task, scores every
//! prunable neuron by attribution, excises the irrelevant ones as whole
//! rows/columns, searches the largest pruning rate that keeps validation
//! accuracy within a margin, and serves requests by temporarily swapping
//! the excised expert in and restoring the full model afterwards.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod localize;
pub mod model;
pub mod orchestrator;
pub mod pretrain;
pub mod relevance;
pub mod tensor;
pub mod trainer;

pub use error::{DoeError, Result};
