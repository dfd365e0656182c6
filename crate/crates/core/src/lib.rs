//! Equivariant, steerable image embeddings on a small CPU autodiff engine.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod rng;
pub mod serve;
pub mod steer;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
