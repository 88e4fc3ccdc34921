//! Detector for AI-generated images built on a CLIP-ViT image encoder.
//!
//! The encoder is frozen and adapted with LoRA. Tapped intermediate layers are
//! fused by a cross-attention module ([`deefuser`]), pooled, projected to a
//! metric-learning embedding and classified by a single logit. Training
//! optimizes a triplet loss plus weighted BCE.
//!
//! ```no_run
//! use deeclip::{config::TrainConfig, detector::Detector};
//! let det = Detector::build(&TrainConfig::toy())?;
//! let images = candle::Tensor::zeros((2, 3, 32, 32), candle::DType::F32, &candle::Device::Cpu)?;
//! let probs = det.probabilities(&images)?;
//! # Ok::<(), deeclip::Error>(())
//! ```

pub mod backbone;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod deefuser;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod head;
pub mod losses;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
