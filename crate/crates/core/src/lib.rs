//! Positive-and-negative contrastive decoding for vision-language models.
//!
//! The decoder runs three streams per generation: the original image
//! features, a positive view amplified where cross-modal attention agrees, and
//! a negative view where the consensus-evidence patches are forward-diffused.
//! Contrasting them suppresses tokens the language prior produces without
//! visual support.

pub mod augment;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod salience;
pub mod toy;

pub use error::{PndError, Result};
pub use matrix::Matrix;
