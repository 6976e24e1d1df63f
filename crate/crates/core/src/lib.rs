pub mod ablation;
pub mod assignment;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod network;
pub mod probs;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
