//! Momentum-contrastive sentence embeddings at desk scale.
//!
//! An online encoder (with a prediction stack) learns to match keys from a
//! slowly moving EMA copy of itself, contrasted against a FIFO queue of
//! earlier keys. Everything runs on `f64` with a small tape autodiff.

pub mod augment;
pub mod cli;
pub mod corpus;
pub mod ema;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod negqueue;
pub mod objective;
pub mod seed;
pub mod tensorgraph;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
