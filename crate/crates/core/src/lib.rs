//! Contrastive analysis on synthetic worlds: learn to split latent codes into
//! common and salient parts, regularize the split, and score it.

pub mod container;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod nn;
pub mod par;
pub mod regularizers;
pub mod separator;
pub mod trainer;
pub mod world;

pub use error::{CaError, Result};
