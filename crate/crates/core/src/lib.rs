//! Selective unlearning for small transformer language models: neuron
//! attribution over a forget set, critical-neuron masks, and masked
//! second-order GradDiff fine-tuning.

pub mod attribution;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod selfcheck;
pub mod unlearn;

pub use error::{Error, Result};
