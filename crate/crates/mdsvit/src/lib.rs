//! Saliency prediction on a from-scratch autodiff tensor core.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`]: dense N-D tensors with reverse-mode automatic
//!   differentiation, generic over `f32`/`f64`.
//! - [`nn`]: convolution, normalization, attention, window attention, patch
//!   ops, upsampling.
//! - [`backbone`]: hierarchical windowed-attention encoder producing a
//!   six-level feature pyramid.
//! - [`model`]: the full network — six positional-embedded transformer
//!   encoders, two multiplicative-skip CNN decoders, and a CNN merge head.
//! - [`losses`] / [`metrics`]: differentiable training losses (CC, SIM, KL)
//!   and double-precision evaluation metrics including threshold-sweep AUC.
//! - [`data`]: PPM/PGM/PNG decoding, manifests, preprocessing, augmentation,
//!   batching, and a synthetic-dataset generator.
//! - [`trainer`]: Adam/AdamW, step-decay scheduling, early stopping,
//!   checkpointing, and the two training loops.
//! - [`cli`]: the `mdsvit` command-line entry point.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
