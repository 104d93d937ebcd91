//! blockpipe: a desk-scale engine for masked discrete-diffusion sequence
//! models. It trains small denoising transformers on synthetic action tasks
//! and benchmarks the full acceleration stack -- block-causal attention with
//! exact KV-cache reuse, diffusion-forcing corruption, asymmetric
//! teacher-to-student distillation, and confidence-guided pipelined parallel
//! decoding -- against autoregressive, vanilla-diffusion, and strict
//! block-diffusion baselines.

pub mod diffusion;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod taskbench;
pub mod tokens;

pub mod cli;
pub mod decoder;
pub mod training;

pub use error::{Error, Result};
