//! Core library for a desk-scale defect-image pipeline: a small tensor
//! autodiff engine, a denoising diffusion model with a U-Net noise
//! predictor, momentum-contrast representation pretraining, linear-probe
//! evaluation, and a synthetic defect dataset generator.
//!
//! Everything is deterministic: computations are single-threaded, all
//! randomness flows through explicitly seeded generators, and repeated runs
//! produce byte-identical outputs.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod moco;
pub mod params;
pub mod pipeline;
pub mod schedule;
pub mod tensor;

pub use autodiff::{grad_check, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
