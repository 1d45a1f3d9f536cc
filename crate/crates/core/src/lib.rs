//! Unified multimodal summarization.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use autodiff::{AttnMask, Tape, Var};
pub use config::{Ablation, DecodeConfig, ExtLossMode, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
