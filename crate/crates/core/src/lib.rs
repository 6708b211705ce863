//! Desk-scale domain-generalization toolkit for underwater-style imagery:
//! a physics-based multi-domain image synthesizer, a bilateral-grid color
//! stylizer with conditional instance normalization, paired-stream feature
//! mixup, margin-based selective contrastive regularization, and a small
//! hand-differentiated classifier for leave-one-domain-out experiments.

pub mod error;
pub mod gradcheck;
pub mod image_model;
pub mod losses;
pub mod mixup;
pub mod nn;
pub mod stylizer;
pub mod trainer;

pub use error::{Error, Result};
