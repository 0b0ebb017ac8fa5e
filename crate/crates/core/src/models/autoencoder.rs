//! Deterministic per-patch autoencoder.
//!
//! Each `f×f` pixel patch maps to one `c`-channel latent vector through a
//! linear map plus a one-hidden-layer GELU branch; the decoder mirrors it.
//! Latents are standardized per channel after training so the diffusion
//! model sees roughly unit-variance inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::latent::{patchify_index, unpatchify_index, LatentSpec};
use super::nn::dense;
use super::params::{xavier, Binding, Group, ParamStore};
use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub spec: LatentSpec,
    pub hidden: usize,
    pub image_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ToyAutoencoder {
    cfg: AutoencoderConfig,
    params: ParamStore,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

impl ToyAutoencoder {
    pub fn new(cfg: AutoencoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.hidden == 0 || cfg.image_channels == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        let pix = cfg.image_channels * cfg.spec.f * cfg.spec.f;
        let (c, h) = (cfg.spec.c, cfg.hidden);
        let mut params = ParamStore::new();
        let mut add = |name: &str, t: Tensor, g: Group| params.insert(name, t, g);
        add("enc.lin.weight", xavier(c, pix, rng), Group::Encoder);
        add("enc.lin.bias", Tensor::zeros(&[c]), Group::Encoder);
        add("enc.fc1.weight", xavier(h, pix, rng), Group::Encoder);
        add("enc.fc1.bias", Tensor::zeros(&[h]), Group::Encoder);
        add("enc.fc2.weight", xavier(c, h, rng).scale(0.1), Group::Encoder);
        add("dec.lin.weight", xavier(pix, c, rng), Group::Decoder);
        add("dec.lin.bias", Tensor::zeros(&[pix]), Group::Decoder);
        add("dec.fc1.weight", xavier(h, c, rng), Group::Decoder);
        add("dec.fc1.bias", Tensor::zeros(&[h]), Group::Decoder);
        add("dec.fc2.weight", xavier(pix, h, rng).scale(0.1), Group::Decoder);
        add(NORM_MEAN, Tensor::zeros(&[c]), Group::Buffer);
        add(NORM_STD, Tensor::full(&[c], 1.0), Group::Buffer);
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: AutoencoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut ae = Self::new(cfg, &mut Rng::new(0))?;
        let expected: Vec<String> = ae.params.names().map(str::to_string).collect();
        for name in expected {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("autoencoder tensor `{name}` missing")))?;
            let slot = ae.params.get_mut(&name)?;
            slot.check_same_shape(t)?;
            *slot = t.clone();
        }
        Ok(ae)
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn spec(&self) -> LatentSpec {
        self.cfg.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 || shape[1] != self.cfg.image_channels {
            return Err(contract!(
                "expected images [B, {}, H, W], got {shape:?}",
                self.cfg.image_channels
            ));
        }
        let f = self.cfg.spec.f;
        if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
            return Err(Error::SpecMismatch(format!(
                "{}x{} image not divisible by f={f}",
                shape[2], shape[3]
            )));
        }
        Ok((shape[0], shape[2], shape[3]))
    }

    /// Raw (unstandardized) latents `[B, c, H/f, W/f]` on a tape.
    pub fn encode_var(&self, tape: &mut Tape, bind: &Binding, images: Var) -> Result<Var> {
        let (b, h, w) = self.check_image(tape.shape(images))?;
        let (f, c, ic) = (self.cfg.spec.f, self.cfg.spec.c, self.cfg.image_channels);
        let (lh, lw) = (h / f, w / f);
        let idx = patchify_index(b, ic, h, w, f);
        let patches = tape.gather(images, idx, &[b * lh * lw, ic * f * f])?;
        let lin = dense(tape, bind, patches, "enc.lin")?;
        let hid = dense(tape, bind, patches, "enc.fc1")?;
        let hid = tape.gelu(hid);
        let nl = dense(tape, bind, hid, "enc.fc2")?;
        let z = tape.add(lin, nl)?;
        // Tokens are latent pixels; fold them back as a 1x1-patch grid.
        let idx = unpatchify_index(b, c, lh, lw, 1);
        tape.gather(z, idx, &[b, c, lh, lw])
    }

    /// Images from raw latents on a tape.
    pub fn decode_var(&self, tape: &mut Tape, bind: &Binding, latents: Var) -> Result<Var> {
        let shape = tape.shape(latents).to_vec();
        let (f, c, ic) = (self.cfg.spec.f, self.cfg.spec.c, self.cfg.image_channels);
        if shape.len() != 4 || shape[1] != c {
            return Err(contract!("expected latents [B, {c}, h, w], got {shape:?}"));
        }
        let (b, lh, lw) = (shape[0], shape[2], shape[3]);
        let idx = patchify_index(b, c, lh, lw, 1);
        let z = tape.gather(latents, idx, &[b * lh * lw, c])?;
        let lin = dense(tape, bind, z, "dec.lin")?;
        let hid = dense(tape, bind, z, "dec.fc1")?;
        let hid = tape.gelu(hid);
        let nl = dense(tape, bind, hid, "dec.fc2")?;
        let x = tape.add(lin, nl)?;
        let idx = unpatchify_index(b, ic, lh * f, lw * f, f);
        tape.gather(x, idx, &[b, ic, lh * f, lw * f])
    }

    /// Standardized latents for a batch `[B, 3, H, W]` or a single `[3, H, W]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let single = images.rank() == 3;
        let batch = if single {
            images.clone().reshape(&with_batch(images.shape()))?
        } else {
            images.clone()
        };
        let mut tape = Tape::new();
        let bind = self.params.bind_constant(&mut tape);
        let x = tape.constant(batch);
        let z = self.encode_var(&mut tape, &bind, x)?;
        let z = self.standardize(tape.value(z))?;
        if single {
            let tail = z_shape_tail(&z);
            z.reshape(&tail)
        } else {
            Ok(z)
        }
    }

    /// Images from standardized latents (batch or single).
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let single = latents.rank() == 3;
        let batch = if single {
            latents.clone().reshape(&with_batch(latents.shape()))?
        } else {
            latents.clone()
        };
        let raw = self.unstandardize(&batch)?;
        let mut tape = Tape::new();
        let bind = self.params.bind_constant(&mut tape);
        let z = tape.constant(raw);
        let x = self.decode_var(&mut tape, &bind, z)?;
        let x = tape.value(x).clone();
        if single {
            let tail = z_shape_tail(&x);
            x.reshape(&tail)
        } else {
            Ok(x)
        }
    }

    fn per_channel(&self, z: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.cfg.spec.c {
            return Err(contract!(
                "expected latents [B, {}, h, w], got {shape:?}",
                self.cfg.spec.c
            ));
        }
        let mean = self.params.get(NORM_MEAN)?.data().to_vec();
        let std = self.params.get(NORM_STD)?.data().to_vec();
        let plane = shape[2] * shape[3];
        let mut out = z.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % shape[1];
            chunk.iter_mut().for_each(|v| *v = f(*v, mean[ch], std[ch]));
        }
        Ok(out)
    }

    fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        self.per_channel(z, |v, m, s| (v - m) / s)
    }

    fn unstandardize(&self, z: &Tensor) -> Result<Tensor> {
        self.per_channel(z, |v, m, s| v * s + m)
    }

    /// Sets the per-channel standardization from raw latents `[B, c, h, w]`.
    pub fn calibrate(&mut self, raw: &Tensor) -> Result<()> {
        let shape = raw.shape();
        let c = self.cfg.spec.c;
        if shape.len() != 4 || shape[1] != c {
            return Err(contract!("expected latents [B, {c}, h, w], got {shape:?}"));
        }
        let plane = shape[2] * shape[3];
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in raw.data().chunks_exact(plane).enumerate() {
            let ch = i % c;
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let n = (shape[0] * plane) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(1e-8)).sqrt() as f32)
            .collect();
        *self.params.get_mut(NORM_MEAN)? = Tensor::new(vec![c], mean)?;
        *self.params.get_mut(NORM_STD)? = Tensor::new(vec![c], std)?;
        Ok(())
    }

    /// Raw latents without standardization, for calibration.
    pub fn encode_raw(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params.bind_constant(&mut tape);
        let x = tape.constant(images.clone());
        let z = self.encode_var(&mut tape, &bind, x)?;
        Ok(tape.value(z).clone())
    }
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

fn z_shape_tail(t: &Tensor) -> Vec<usize> {
    t.shape()[1..].to_vec()
}
