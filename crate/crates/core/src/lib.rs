//! Fair fine-tuning of a pretrained classifier's final linear layer.
//!
//! The head is factorized with an SVD weighted by group-neutralized Fisher
//! importance, replaced with two low-rank layers, and fine-tuned on a new
//! task. Baselines, fairness metrics, and an experiment harness live
//! alongside.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod linalg;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use error::{Error, ErrorClass, Result};
