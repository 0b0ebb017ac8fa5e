//! Autoencoders, the diffusion transformer, and LoRA adapters.

pub mod autoencoder;
pub mod dit;
pub mod latent;
pub mod lora;
mod nn;
pub mod params;

pub use autoencoder::{AutoencoderConfig, ToyAutoencoder};
pub use dit::{Conditioning, DiTModel, DitConfig};
pub use latent::{token_count, LatentSpec};
pub use lora::{LoraAdapter, DEFAULT_TARGETS};
pub use nn::sinusoidal;
pub use params::{Binding, FreezeGuard, Group, Param, ParamCount, ParamStore};
