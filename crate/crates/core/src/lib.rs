//! Hyperlayer-augmented stacked convolutional auto-encoder: greedy
//! auto-encoder pretraining, multi-scale feature fusion, supervised
//! fine-tuning and deconvolutional reconstruction, in plain `f64`.

pub mod cae;
pub mod cli;
pub mod config;
pub mod data;
pub mod deconv;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
