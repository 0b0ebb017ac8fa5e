//! Adapting pretrained toy diffusion transformers to deeply compressed
//! latent spaces.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`rng`], [`optim`]: f32 tensors with tape autodiff, seeded
//!   streams, AdamW and EMA.
//! - [`models`]: per-patch autoencoders, the adaLN diffusion transformer,
//!   and LoRA adapters.
//! - [`objectives`]: flow matching, guidance combination and its inverse,
//!   distillation, and embedding alignment losses.
//! - [`pipeline`]: datasets, every training stage, and the Euler sampler.
//! - [`diagnostics`]: per-layer representation gap, token/latency
//!   benchmarks, and paired run comparison.
//! - [`io`]: checkpoints, metrics CSV, and configuration.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use models::{token_count, DiTModel, LatentSpec, ToyAutoencoder};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
