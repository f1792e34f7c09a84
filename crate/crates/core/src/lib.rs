//! embfuse: detect machine-generated text by fusing pretrained language
//! model embeddings into small 2D images and classifying them with a CNN.

pub mod classifier;
pub mod corpus;
pub mod embedders;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod hashing;
pub mod metrics;
pub mod rng;

pub use classifier::train::evaluate;
pub use error::{Error, Result};
