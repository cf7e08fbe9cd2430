//! Contrastive training with learned negative hardness for implicit-feedback
//! top-K recommendation.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod numkit;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
