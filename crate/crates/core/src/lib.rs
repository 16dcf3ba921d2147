//! Parameter-efficient fine-tuning toolkit for small vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! * [`nn`]: ViT / residual CNN backbones, classification head, checkpoints
//! * [`quant`]: NF4 blockwise quantization with double-quantized scales
//! * [`peft`]: LoRA and DoRA adapters, merging, parameter accounting
//! * [`train`]: AdamW, warmup + cosine schedule, accumulation, early stopping
//! * [`data`]: directory datasets, augmentation, synthetic 9-class generator
//! * [`metrics`]: confusion matrices, per-class reports, efficiency timing
//! * [`runner`]: experiment configs and the pipeline behind the CLI

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod peft;
pub mod quant;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
