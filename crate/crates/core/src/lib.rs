//! Evolved weighting of multi-modal, multi-task self-supervised losses.
//!
//! Small per-modality encoders are trained on synthetic clips under a
//! weighted sum of self-supervised task losses and cross-modal distillation
//! penalties. An evolutionary search tunes the sixteen weights, scoring each
//! candidate by how well k-means clusters of the learned RGB embeddings agree
//! with held-out class labels.

pub mod autodiff;
pub mod config;
pub mod cluster;
pub mod distill;
pub mod error;
pub mod evolution;
pub mod experiments;
pub mod fitness;
pub mod model;
pub mod probe;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
