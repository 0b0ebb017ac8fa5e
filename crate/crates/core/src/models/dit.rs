//! Diffusion transformer with adaLN-Zero blocks.
//!
//! Layout of the parameter namespace:
//!
//! | prefix            | group          | role                                   |
//! |-------------------|----------------|----------------------------------------|
//! | `embed.*`         | Embedder       | latent patch → hidden, learned positions |
//! | `head.*`          | Head           | hidden → latent patch                  |
//! | `blocks.{i}.*`    | Trunk          | attention + MLP with adaLN modulation  |
//! | `final.*`         | Trunk          | modulation before the head             |
//! | `cond.*`          | Conditioning   | timestep MLP, class table (last row = ∅) |
//! | `guide.*`         | Guidance       | guidance-scale MLP (distilled models)  |
//!
//! Only `embed.*` and `head.*` depend on the latent space, so adapting to a
//! new autoencoder replaces exactly those two groups.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::latent::{patchify_index, unpatchify_index, LatentSpec};
use super::lora::{self, LoraAdapter};
use super::nn::{chunk_broadcast_index, dense, linear, row_index, sinusoidal, tile_index};
use super::params::{xavier, Binding, Group, ParamCount, ParamStore};
use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const T_SCALE: f32 = 1000.0;
const W_SCALE: f32 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub spec: LatentSpec,
    /// Pixel extents `(H, W)` the model is built for.
    pub image_size: (usize, usize),
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub freq_dim: usize,
    pub guidance_embed: bool,
}

impl DitConfig {
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        self.spec.token_grid(self.image_size.0, self.image_size.1)
    }

    pub fn tokens(&self) -> Result<usize> {
        let (gh, gw) = self.token_grid()?;
        Ok(gh * gw)
    }

    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        self.spec.latent_shape(self.image_size.0, self.image_size.1)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("model widths and depth must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::Config("freq_dim must be even and >= 2".into()));
        }
        self.token_grid()?;
        Ok(())
    }
}

/// Per-sample conditioning for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    /// Timesteps in `[0, 1]`, one per batch entry.
    pub t: &'a [f32],
    /// Class ids; `None` selects the learned null embedding.
    pub class: &'a [Option<usize>],
    /// Guidance scales for distilled models.
    pub w: Option<&'a [f32]>,
}

#[derive(Clone, Debug)]
pub struct DiTModel {
    cfg: DitConfig,
    params: ParamStore,
    adapters: BTreeMap<String, LoraAdapter>,
}

fn block(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

impl DiTModel {
    /// Fresh model. Modulation layers start at zero (adaLN-Zero) and the head
    /// starts at zero, so the untrained model predicts zero velocity.
    pub fn new(cfg: DitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut params = ParamStore::new();
        let mut rng_cond = rng.fork(1);
        let mut rng_trunk = rng.fork(2);

        params.insert(
            "cond.t_mlp.fc1.weight",
            Tensor::randn(&[d, cfg.freq_dim], 0.02, &mut rng_cond),
            Group::Conditioning,
        );
        params.insert("cond.t_mlp.fc1.bias", Tensor::zeros(&[d]), Group::Conditioning);
        params.insert(
            "cond.t_mlp.fc2.weight",
            Tensor::randn(&[d, d], 0.02, &mut rng_cond),
            Group::Conditioning,
        );
        params.insert("cond.t_mlp.fc2.bias", Tensor::zeros(&[d]), Group::Conditioning);
        params.insert(
            "cond.class_table",
            Tensor::randn(&[cfg.num_classes + 1, d], 0.02, &mut rng_cond),
            Group::Conditioning,
        );

        let m = d * cfg.mlp_ratio;
        for i in 0..cfg.depth {
            let mut ins = |name: &str, t: Tensor| params.insert(block(i, name), t, Group::Trunk);
            ins("adaln.weight", Tensor::zeros(&[6 * d, d]));
            ins("adaln.bias", Tensor::zeros(&[6 * d]));
            ins("attn.qkv.weight", xavier(3 * d, d, &mut rng_trunk));
            ins("attn.qkv.bias", Tensor::zeros(&[3 * d]));
            ins("attn.proj.weight", xavier(d, d, &mut rng_trunk));
            ins("attn.proj.bias", Tensor::zeros(&[d]));
            ins("mlp.fc1.weight", xavier(m, d, &mut rng_trunk));
            ins("mlp.fc1.bias", Tensor::zeros(&[m]));
            ins("mlp.fc2.weight", xavier(d, m, &mut rng_trunk));
            ins("mlp.fc2.bias", Tensor::zeros(&[d]));
        }
        params.insert("final.adaln.weight", Tensor::zeros(&[2 * d, d]), Group::Trunk);
        params.insert("final.adaln.bias", Tensor::zeros(&[2 * d]), Group::Trunk);

        let mut model = Self {
            cfg,
            params,
            adapters: BTreeMap::new(),
        };
        model.init_embedder(&mut rng.fork(3));
        model.init_head(&mut rng.fork(4), true);
        if model.cfg.guidance_embed {
            model.init_guidance(&mut rng.fork(5));
        }
        Ok(model)
    }

    fn init_embedder(&mut self, rng: &mut Rng) {
        let d = self.cfg.hidden;
        let pd = self.cfg.spec.patch_dim();
        let t = self.cfg.tokens().expect("validated grid");
        self.params
            .insert("embed.proj.weight", xavier(d, pd, rng), Group::Embedder);
        self.params
            .insert("embed.proj.bias", Tensor::zeros(&[d]), Group::Embedder);
        self.params
            .insert("embed.pos", Tensor::randn(&[t, d], 0.02, rng), Group::Embedder);
    }

    fn init_head(&mut self, rng: &mut Rng, zero: bool) {
        let d = self.cfg.hidden;
        let pd = self.cfg.spec.patch_dim();
        let w = if zero {
            Tensor::zeros(&[pd, d])
        } else {
            xavier(pd, d, rng)
        };
        self.params.insert("head.proj.weight", w, Group::Head);
        self.params.insert("head.proj.bias", Tensor::zeros(&[pd]), Group::Head);
    }

    /// Guidance-scale MLP whose output layer starts at zero, so adding it
    /// leaves the model's outputs unchanged.
    fn init_guidance(&mut self, rng: &mut Rng) {
        let d = self.cfg.hidden;
        self.params.insert(
            "guide.w_mlp.fc1.weight",
            Tensor::randn(&[d, self.cfg.freq_dim], 0.02, rng),
            Group::Guidance,
        );
        self.params
            .insert("guide.w_mlp.fc1.bias", Tensor::zeros(&[d]), Group::Guidance);
        self.params
            .insert("guide.w_mlp.fc2.weight", Tensor::zeros(&[d, d]), Group::Guidance);
        self.params
            .insert("guide.w_mlp.fc2.bias", Tensor::zeros(&[d]), Group::Guidance);
    }

    /// Rebuilds a model from stored tensors and adapter records.
    pub fn from_parts(
        cfg: DitConfig,
        tensors: BTreeMap<String, Tensor>,
        adapters: BTreeMap<String, LoraAdapter>,
    ) -> Result<Self> {
        let mut model = Self::new(cfg, &mut Rng::new(0))?;
        for adapter in adapters.values() {
            let shape = model.params.get(&adapter.target)?.shape().to_vec();
            model
                .params
                .insert(adapter.a_name(), Tensor::zeros(&[adapter.rank, shape[1]]), Group::Lora);
            model
                .params
                .insert(adapter.b_name(), Tensor::zeros(&[shape[0], adapter.rank]), Group::Lora);
        }
        model.adapters = adapters;
        let expected: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("model tensor `{name}` missing")))?;
            let slot = model.params.get_mut(name)?;
            slot.check_same_shape(t)?;
            *slot = t.clone();
        }
        if let Some(extra) = tensors.keys().find(|k| !model.params.contains(k)) {
            return Err(Error::Format(format!("unexpected model tensor `{extra}`")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &DitConfig {
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

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub fn is_guidance_distilled(&self) -> bool {
        self.cfg.guidance_embed
    }

    /// Adds a fresh guidance embedding; outputs are unchanged until trained.
    pub fn enable_guidance_embedding(&mut self, rng: &mut Rng) -> Result<()> {
        if self.cfg.guidance_embed {
            return Err(Error::State("model already has a guidance embedding".into()));
        }
        self.cfg.guidance_embed = true;
        self.init_guidance(rng);
        Ok(())
    }

    /// Swaps in a randomly initialized embedder and head for another latent
    /// space. Trunk, conditioning and guidance weights are kept.
    pub fn replace_latent_modules(&mut self, spec: LatentSpec, rng: &mut Rng) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.spec = spec;
        cfg.validate()?;
        self.cfg = cfg;
        for name in [
            "embed.proj.weight",
            "embed.proj.bias",
            "embed.pos",
            "head.proj.weight",
            "head.proj.bias",
        ] {
            self.params.remove(name);
        }
        self.init_embedder(&mut rng.fork(3));
        self.init_head(&mut rng.fork(4), false);
        Ok(())
    }

    /// Installs LoRA adapters and freezes everything except adapters,
    /// embedder and head.
    pub fn attach_lora(&mut self, targets: &[String], rank: usize, alpha: f32, rng: &mut Rng) -> Result<ParamCount> {
        lora::attach(&mut self.params, &mut self.adapters, targets, rank, alpha, rng)?;
        self.params
            .set_trainable(|_, g| matches!(g, Group::Lora | Group::Embedder | Group::Head));
        Ok(self.params.count())
    }

    /// Folds adapters into their base weights.
    pub fn merge_lora(&mut self) -> Result<()> {
        lora::merge(&mut self.params, &mut self.adapters)
    }

    fn check_input(&self, shape: &[usize], cond: &Conditioning<'_>) -> Result<usize> {
        let want = self.cfg.latent_shape()?;
        if shape.len() != 4 || shape[1..] != want {
            return Err(contract!("expected latents [B, {want:?}], got {shape:?}"));
        }
        let b = shape[0];
        if cond.t.len() != b || cond.class.len() != b {
            return Err(contract!("conditioning length does not match batch {b}"));
        }
        if let Some(&bad) = cond.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(contract!("timestep {bad} outside [0, 1]"));
        }
        if let Some(bad) = cond.class.iter().flatten().find(|&&c| c >= self.cfg.num_classes) {
            return Err(contract!("class {bad} out of range ({} classes)", self.cfg.num_classes));
        }
        match (cond.w, self.cfg.guidance_embed) {
            (Some(w), true) if w.len() != b => Err(contract!("guidance length does not match batch {b}")),
            (None, true) => Err(contract!("guidance-distilled model needs a guidance scale")),
            _ => Ok(b),
        }
    }

    /// Patch embedding `[B, gh, gw, D]` of latents `[B, c, h, w]`, positions included.
    pub fn embed(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let [c, lh, lw] = self.cfg.latent_shape()?;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [c, lh, lw] {
            return Err(contract!("expected latents [B, {c}, {lh}, {lw}], got {shape:?}"));
        }
        let b = shape[0];
        let p = self.cfg.spec.p;
        let (gh, gw) = self.cfg.token_grid()?;
        let t = gh * gw;
        let d = self.cfg.hidden;
        let tokens = tape.gather(x, patchify_index(b, c, lh, lw, p), &[b * t, p * p * c])?;
        let h = linear(tape, bind, &self.adapters, tokens, "embed.proj")?;
        let pos = tape.gather(bind.get("embed.pos")?, tile_index(b, t, d), &[b * t, d])?;
        let h = tape.add(h, pos)?;
        tape.reshape(h, &[b, gh, gw, d])
    }

    fn condition(&self, tape: &mut Tape, bind: &Binding, cond: &Conditioning<'_>) -> Result<Var> {
        let d = self.cfg.hidden;
        let f = self.cfg.freq_dim;
        let temb = tape.constant(sinusoidal(cond.t, f, T_SCALE));
        let h = dense(tape, bind, temb, "cond.t_mlp.fc1")?;
        let h = tape.silu(h);
        let temb = dense(tape, bind, h, "cond.t_mlp.fc2")?;
        let ids: Vec<usize> = cond.class.iter().map(|c| c.unwrap_or(self.cfg.num_classes)).collect();
        let yemb = tape.gather(bind.get("cond.class_table")?, row_index(&ids, d), &[ids.len(), d])?;
        let mut c = tape.add(temb, yemb)?;
        if self.cfg.guidance_embed {
            let w = cond.w.ok_or_else(|| contract!("missing guidance scale"))?;
            let wemb = tape.constant(sinusoidal(w, f, W_SCALE));
            let h = dense(tape, bind, wemb, "guide.w_mlp.fc1")?;
            let h = tape.silu(h);
            let wemb = dense(tape, bind, h, "guide.w_mlp.fc2")?;
            c = tape.add(c, wemb)?;
        }
        Ok(tape.silu(c))
    }

    /// Runs the transformer blocks on embedded tokens `[B·T, D]`; returns the
    /// final hidden state and each block's post-residual output.
    pub fn trunk(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        tokens: Var,
        b: usize,
        cond: &Conditioning<'_>,
    ) -> Result<(Var, Vec<Var>, Var)> {
        let d = self.cfg.hidden;
        let rows = tape.shape(tokens)[0];
        if !rows.is_multiple_of(b) || tape.shape(tokens)[1] != d {
            return Err(contract!("trunk input {:?} does not fit batch {b}", tape.shape(tokens)));
        }
        let t = rows / b;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let sc = self.condition(tape, bind, cond)?;

        let chunk6: Vec<Arc<[usize]>> = (0..6).map(|k| chunk_broadcast_index(b, t, d, 6, k)).collect();
        let split: Vec<Arc<[usize]>> = (0..3).map(|k| qkv_split_index(b, t, heads, dh, k)).collect();
        let merge = head_merge_index(b, t, heads, dh);
        let attn_scale = 1.0 / (dh as f32).sqrt();

        let mut h = tokens;
        let mut features = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            let m = dense(tape, bind, sc, &block(i, "adaln"))?;
            let mut ch = Vec::with_capacity(6);
            for idx in &chunk6 {
                ch.push(tape.gather(m, idx.clone(), &[rows, d])?);
            }
            let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) = (ch[0], ch[1], ch[2], ch[3], ch[4], ch[5]);

            let x = modulate(tape, h, shift_a, scale_a)?;
            let qkv = linear(tape, bind, &self.adapters, x, &block(i, "attn.qkv"))?;
            let q = tape.gather(qkv, split[0].clone(), &[b * heads, t, dh])?;
            let k = tape.gather(qkv, split[1].clone(), &[b * heads, t, dh])?;
            let v = tape.gather(qkv, split[2].clone(), &[b * heads, t, dh])?;
            let s = tape.matmul_t(q, k)?;
            let s = tape.scale(s, attn_scale);
            let a = tape.softmax(s)?;
            let o = tape.matmul(a, v)?;
            let o = tape.gather(o, merge.clone(), &[rows, d])?;
            let o = linear(tape, bind, &self.adapters, o, &block(i, "attn.proj"))?;
            let o = tape.mul(gate_a, o)?;
            h = tape.add(h, o)?;

            let x = modulate(tape, h, shift_m, scale_m)?;
            let f = linear(tape, bind, &self.adapters, x, &block(i, "mlp.fc1"))?;
            let f = tape.gelu(f);
            let f = linear(tape, bind, &self.adapters, f, &block(i, "mlp.fc2"))?;
            let f = tape.mul(gate_m, f)?;
            h = tape.add(h, f)?;
            features.push(h);
        }
        Ok((h, features, sc))
    }

    /// Velocity prediction with the same shape as `x`, plus per-block features.
    pub fn forward_with_features(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        cond: &Conditioning<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let b = self.check_input(tape.shape(x), cond)?;
        let [c, lh, lw] = self.cfg.latent_shape()?;
        let d = self.cfg.hidden;
        let p = self.cfg.spec.p;
        let emb = self.embed(tape, bind, x)?;
        let t = self.cfg.tokens()?;
        let tokens = tape.reshape(emb, &[b * t, d])?;
        let (h, features, sc) = self.trunk(tape, bind, tokens, b, cond)?;

        let m = dense(tape, bind, sc, "final.adaln")?;
        let shift = tape.gather(m, chunk_broadcast_index(b, t, d, 2, 0), &[b * t, d])?;
        let scale = tape.gather(m, chunk_broadcast_index(b, t, d, 2, 1), &[b * t, d])?;
        let x = modulate(tape, h, shift, scale)?;
        let out = linear(tape, bind, &self.adapters, x, "head.proj")?;
        let out = tape.gather(out, unpatchify_index(b, c, lh, lw, p), &[b, c, lh, lw])?;
        Ok((out, features))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, cond: &Conditioning<'_>) -> Result<Var> {
        Ok(self.forward_with_features(tape, bind, x, cond)?.0)
    }

    /// Gradient-free velocity prediction for a batch `[B, c, h, w]`.
    pub fn predict(&self, x: &Tensor, cond: &Conditioning<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bind, xv, cond)?;
        Ok(tape.value(out).clone())
    }

    /// One `[B, T, D]` tensor per block, recorded after the block's residual adds.
    pub fn capture_layer_features(&self, x: &Tensor, cond: &Conditioning<'_>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bind = self.params.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, feats) = self.forward_with_features(&mut tape, &bind, xv, cond)?;
        let b = x.shape()[0];
        let t = self.cfg.tokens()?;
        feats
            .into_iter()
            .map(|f| tape.value(f).clone().reshape(&[b, t, self.cfg.hidden]))
            .collect()
    }

    /// Trunk parameters (blocks + final modulation) as copies.
    pub fn trunk_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params.snapshot(|_, p| p.group == Group::Trunk)
    }
}

/// `LN(h)·(1 + scale) + shift`.
fn modulate(tape: &mut Tape, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(h)?;
    let s1 = tape.offset(scale, 1.0);
    let x = tape.mul(n, s1)?;
    tape.add(x, shift)
}

/// `[B·T, 3D]` → `[B·H, T, dh]` for part `k` (0 = q, 1 = k, 2 = v).
fn qkv_split_index(b: usize, t: usize, heads: usize, dh: usize, k: usize) -> Arc<[usize]> {
    let d = heads * dh;
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for hh in 0..heads {
            for ti in 0..t {
                let base = (bi * t + ti) * 3 * d + k * d + hh * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx.into()
}

/// `[B·H, T, dh]` → `[B·T, D]`.
fn head_merge_index(b: usize, t: usize, heads: usize, dh: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(b * t * heads * dh);
    for bi in 0..b {
        for ti in 0..t {
            for hh in 0..heads {
                let base = ((bi * heads + hh) * t + ti) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::lora::DEFAULT_TARGETS;
    use crate::models::token_count;

    fn cfg(spec: LatentSpec) -> DitConfig {
        DitConfig {
            spec,
            image_size: (32, 32),
            hidden: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            freq_dim: 16,
            guidance_embed: false,
        }
    }

    fn low() -> LatentSpec {
        LatentSpec::new(4, 2, 4).unwrap()
    }

    /// Fresh model with zero-initialized tensors filled in so outputs depend
    /// on every group.
    fn model(seed: u64) -> DiTModel {
        let mut rng = Rng::new(seed);
        let mut m = DiTModel::new(cfg(low()), &mut rng).unwrap();
        let names: Vec<String> = m.params().names().map(str::to_string).collect();
        for n in names {
            let t = m.params_mut().get_mut(&n).unwrap();
            *t = t.add(&Tensor::randn(t.shape(), 0.05, &mut rng)).unwrap();
        }
        m
    }

    fn input(m: &DiTModel, b: usize, seed: u64) -> Tensor {
        let [c, h, w] = m.config().latent_shape().unwrap();
        Tensor::randn(&[b, c, h, w], 1.0, &mut Rng::new(seed))
    }

    fn run(m: &DiTModel, x: &Tensor, class: &[Option<usize>]) -> Tensor {
        let t = vec![0.3; class.len()];
        m.predict(x, &Conditioning { t: &t, class, w: None }).unwrap()
    }

    #[test]
    fn fresh_model_output_is_finite_and_shaped() {
        let m = DiTModel::new(cfg(low()), &mut Rng::new(0)).unwrap();
        let x = input(&m, 3, 1);
        let y = run(&m, &x, &[Some(0), None, Some(3)]);
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn tokens_follow_token_count() {
        for spec in [
            low(),
            LatentSpec::new(8, 2, 16).unwrap(),
            LatentSpec::new(8, 1, 8).unwrap(),
        ] {
            let m = DiTModel::new(cfg(spec), &mut Rng::new(0)).unwrap();
            let x = input(&m, 2, 0);
            let feats = m
                .capture_layer_features(
                    &x,
                    &Conditioning {
                        t: &[0.5, 0.5],
                        class: &[None, None],
                        w: None,
                    },
                )
                .unwrap();
            assert_eq!(feats.len(), 2);
            assert_eq!(feats[0].shape()[1], token_count(32, 32, &spec).unwrap());
        }
    }

    #[test]
    fn null_condition_is_deterministic() {
        let m = model(2);
        let x = input(&m, 2, 3);
        assert!(run(&m, &x, &[None, None]).bit_eq(&run(&m, &x, &[None, None])));
        assert!(!run(&m, &x, &[None, None]).bit_eq(&run(&m, &x, &[Some(1), Some(1)])));
    }

    #[test]
    fn features_repeat_across_calls() {
        let m = model(4);
        let x = input(&m, 1, 5);
        let cond = Conditioning {
            t: &[0.7],
            class: &[Some(2)],
            w: None,
        };
        let a = m.capture_layer_features(&x, &cond).unwrap();
        let b = m.capture_layer_features(&x, &cond).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn bad_inputs_are_contract_errors() {
        let m = model(6);
        let x = input(&m, 1, 0);
        let cond = |t: &'static [f32], c: &'static [Option<usize>]| Conditioning { t, class: c, w: None };
        assert!(m.predict(&x, &cond(&[1.5], &[None])).is_err());
        assert!(m.predict(&x, &cond(&[0.5], &[Some(9)])).is_err());
        assert!(m.predict(&x, &cond(&[0.5, 0.5], &[None, None])).is_err());
        let wrong = Tensor::zeros(&[1, 3, 8, 8]);
        assert_eq!(
            m.predict(&wrong, &cond(&[0.5], &[None])).unwrap_err().kind(),
            "contract"
        );
    }

    #[test]
    fn lora_is_transparent_at_init_and_freezes_trunk() {
        let base = model(7);
        let x = input(&base, 2, 8);
        let before = run(&base, &x, &[Some(0), None]);
        let mut m = base.clone();
        let targets: Vec<String> = DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect();
        let count = m.attach_lora(&targets, 4, 4.0, &mut Rng::new(9)).unwrap();
        assert!(run(&m, &x, &[Some(0), None]).bit_eq(&before));
        assert!(count.trainable < count.total);
        for (name, p) in m.params().iter() {
            let trainable = matches!(p.group, Group::Lora | Group::Embedder | Group::Head);
            assert_eq!(!p.frozen, trainable, "{name}");
        }
        assert_eq!(m.adapters().len(), 4 * 2);
    }

    #[test]
    fn unresolved_lora_pattern_is_config_error() {
        let mut m = model(10);
        let err = m
            .attach_lora(&["nothing.*".into()], 4, 4.0, &mut Rng::new(0))
            .unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn merge_preserves_outputs_and_is_single_shot() {
        let mut m = model(11);
        let targets: Vec<String> = DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect();
        let zero_b = {
            let mut z = m.clone();
            z.attach_lora(&targets, 4, 8.0, &mut Rng::new(1)).unwrap();
            z.merge_lora().unwrap();
            z
        };
        assert!(zero_b.params().matches_bitwise(&m.trunk_snapshot()));

        m.attach_lora(&targets, 4, 8.0, &mut Rng::new(1)).unwrap();
        let names: Vec<String> = m.adapters().values().map(|a| a.b_name()).collect();
        let mut rng = Rng::new(12);
        for n in names {
            let t = m.params_mut().get_mut(&n).unwrap();
            *t = Tensor::randn(t.shape(), 0.1, &mut rng);
        }
        let x = input(&m, 2, 13);
        let adapted = run(&m, &x, &[Some(1), None]);
        m.merge_lora().unwrap();
        assert!(m.adapters().is_empty());
        let merged = run(&m, &x, &[Some(1), None]);
        let rel = (merged.mse(&adapted).unwrap() / adapted.mean_square()).sqrt();
        assert!(rel <= 1e-6, "merged forward differs by {rel}");
        assert_eq!(m.merge_lora().unwrap_err().kind(), "state");
    }

    #[test]
    fn swapping_latent_modules_keeps_trunk() {
        let mut m = model(14);
        let trunk = m.trunk_snapshot();
        let backbone: usize = [Group::Trunk, Group::Conditioning]
            .iter()
            .map(|g| m.params().count_group(*g))
            .sum();
        m.replace_latent_modules(LatentSpec::new(8, 2, 16).unwrap(), &mut Rng::new(15))
            .unwrap();
        assert!(m.params().matches_bitwise(&trunk));
        let after: usize = [Group::Trunk, Group::Conditioning]
            .iter()
            .map(|g| m.params().count_group(*g))
            .sum();
        assert_eq!(backbone, after);
        assert_eq!(m.config().tokens().unwrap(), 4);
        let x = input(&m, 1, 0);
        assert_eq!(run(&m, &x, &[None]).shape(), x.shape());
    }

    #[test]
    fn guidance_embedding_starts_transparent() {
        let base = model(16);
        let x = input(&base, 2, 17);
        let before = run(&base, &x, &[Some(0), None]);
        let mut m = base.clone();
        m.enable_guidance_embedding(&mut Rng::new(18)).unwrap();
        let t = [0.3, 0.3];
        let w = [2.0, 4.0];
        let after = m
            .predict(
                &x,
                &Conditioning {
                    t: &t,
                    class: &[Some(0), None],
                    w: Some(&w),
                },
            )
            .unwrap();
        assert!(after.bit_eq(&before));
        assert!(m.enable_guidance_embedding(&mut Rng::new(0)).is_err());
    }
}
