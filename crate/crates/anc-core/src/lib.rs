//! Correspondence matching with adaptive neighbourhood consensus.
//!
//! Feature maps of two images are turned into 4D correlation volumes, refined
//! by learned 4D convolutions in both matching directions, filtered for
//! mutual nearest neighbours and read out as matching probabilities. The
//! crate also carries the pieces needed to train and evaluate such a model
//! on a CPU: a small reverse-mode tape, Adam, keypoint losses and PCK.

pub mod autodiff;
pub mod conv4d;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod matching;
pub mod model;
mod par;
pub mod rng;
pub mod self_similarity;
pub mod tensor;
pub mod tns;
pub mod training;

pub use error::{AncError, Result};
pub use par::with_threads;
