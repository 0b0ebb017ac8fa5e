//! Paired runs behind the adaptation comparisons: with vs without embedding
//! alignment, LoRA vs full fine-tuning, and guided vs naive fine-tuning of a
//! guidance-distilled model.

use serde::Serialize;

use super::config::{GuidanceRange, StageConfig};
use super::data::{LatentData, LatentSet};
use super::stages::{
    adapt_model, align_output_head, align_patch_embedder, corrected_velocity_error, finetune_distilled_naive,
    finetune_full, finetune_lora,
};
use super::trainer::{RunOptions, StageOutcome};
use crate::diagnostics::{compare_records, Comparison};
use crate::error::{contract, Error, Result};
use crate::models::{Conditioning, DiTModel, LatentSpec};
use crate::tensor::{Tape, Tensor};

/// Stage settings for one with/without-alignment comparison.
#[derive(Clone, Debug)]
pub struct AlignmentAblation {
    pub align_embed: StageConfig,
    pub align_head: StageConfig,
    pub finetune: StageConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AlignmentAblationResult {
    pub aligned: StageOutcome,
    pub unaligned: StageOutcome,
    pub align_embed: StageOutcome,
    pub align_head: StageOutcome,
    /// Fine-tune validation loss, aligned (A) against unaligned (B).
    pub comparison: Comparison,
    /// Snapshots after embedder alignment and after head alignment.
    pub embed_aligned_model: DiTModel,
    pub head_aligned_model: DiTModel,
    pub aligned_model: DiTModel,
    pub unaligned_model: DiTModel,
}

/// Adapts `base` to `spec` twice from the same random embedder and head:
/// once through embedder alignment, head alignment and fine-tuning, once by
/// fine-tuning directly. Both fine-tunes use the same seed and batches.
pub fn alignment_ablation(
    base: &DiTModel,
    spec: LatentSpec,
    low: &LatentData,
    high: &LatentData,
    cfg: &AlignmentAblation,
) -> Result<AlignmentAblationResult> {
    let fresh = adapt_model(base, spec, cfg.seed)?;

    let mut aligned = fresh.clone();
    let align_embed = align_patch_embedder(
        &mut aligned,
        base,
        low,
        high,
        &cfg.align_embed,
        cfg.seed,
        RunOptions::default(),
    )?;
    let embed_aligned_model = aligned.clone();
    let align_head = align_output_head(&mut aligned, high, &cfg.align_head, cfg.seed, RunOptions::default())?;
    let head_aligned_model = aligned.clone();
    let tuned_aligned = finetune_lora(&mut aligned, high, &cfg.finetune, cfg.seed, RunOptions::default())?;

    let mut unaligned = fresh;
    let tuned_unaligned = finetune_lora(&mut unaligned, high, &cfg.finetune, cfg.seed, RunOptions::default())?;

    let comparison = compare_records(
        &tuned_aligned.records,
        &tuned_unaligned.records,
        "val_loss",
        cfg.finetune.warmup_steps,
    )?;
    Ok(AlignmentAblationResult {
        aligned: tuned_aligned,
        unaligned: tuned_unaligned,
        align_embed,
        align_head,
        comparison,
        embed_aligned_model,
        head_aligned_model,
        aligned_model: aligned,
        unaligned_model: unaligned,
    })
}

/// Fixed inputs for measuring how far a fine-tune moved the trunk: embedded
/// tokens from the pretrained embedder, with fixed conditioning.
#[derive(Clone, Debug)]
pub struct TrunkProbe {
    /// `[B·T, D]` tokens.
    pub tokens: Tensor,
    pub batch: usize,
    pub t: Vec<f32>,
    pub class: Vec<Option<usize>>,
    pub w: Option<Vec<f32>>,
}

impl TrunkProbe {
    /// Embeds the first `n` latents of `set` with `base`'s own embedder.
    pub fn new(base: &DiTModel, set: &LatentSet, n: usize, t: f32) -> Result<Self> {
        let n = n.min(set.len());
        if n == 0 {
            return Err(contract!("trunk probe needs at least one latent"));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, labels) = set.gather(&idx)?;
        let mut tape = Tape::new();
        let bind = base.params().bind_constant(&mut tape);
        let xv = tape.constant(x);
        let e = base.embed(&mut tape, &bind, xv)?;
        let d = base.config().hidden;
        let tokens = tape.value(e).clone();
        let rows = tokens.numel() / d;
        Ok(Self {
            tokens: tokens.reshape(&[rows, d])?,
            batch: n,
            t: vec![t; n],
            class: labels.into_iter().map(Some).collect(),
            w: base.is_guidance_distilled().then(|| vec![1.0; n]),
        })
    }

    fn output(&self, model: &DiTModel) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = model.params().bind_constant(&mut tape);
        let tokens = tape.constant(self.tokens.clone());
        let cond = Conditioning {
            t: &self.t,
            class: &self.class,
            w: self.w.as_deref(),
        };
        let (h, _, _) = model.trunk(&mut tape, &bind, tokens, self.batch, &cond)?;
        Ok(tape.value(h).clone())
    }

    /// Mean over probe samples of `‖h_tuned − h_base‖ / ‖h_base‖` for the
    /// trunk output `h`.
    pub fn drift(&self, base: &DiTModel, tuned: &DiTModel) -> Result<f64> {
        let a = self.output(base)?;
        let b = self.output(tuned)?;
        let per = a.numel() / self.batch;
        let mut acc = 0.0;
        for (x, y) in a.data().chunks(per).zip(b.data().chunks(per)) {
            let num: f64 = x.iter().zip(y).map(|(&u, &v)| ((u - v) as f64).powi(2)).sum();
            let den: f64 = x.iter().map(|&u| (u as f64).powi(2)).sum();
            acc += (num / den.max(1e-30)).sqrt();
        }
        Ok(acc / self.batch as f64)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LoraAblationResult {
    pub lora_trainable: usize,
    pub lora_total: usize,
    pub lora_fraction: f64,
    pub full_fraction: f64,
    pub lora_drift: f64,
    pub full_drift: f64,
    pub lora_val_loss: f64,
    pub full_val_loss: f64,
}

/// Fine-tunes copies of `start` with LoRA and with every parameter trainable
/// at the same budget and seed, and measures trunk drift against `reference`
/// (the pretrained model whose embedder produced the probe).
pub fn lora_ablation(
    start: &DiTModel,
    reference: &DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    probe: &TrunkProbe,
    seed: u64,
) -> Result<LoraAblationResult> {
    if cfg.lora.is_none() {
        return Err(Error::Config(
            "stage.finetune.lora is required for the LoRA comparison".into(),
        ));
    }
    let mut lora = start.clone();
    let lo = finetune_lora(&mut lora, data, cfg, seed, RunOptions::default())?;
    let lc = lora.params().count();
    let mut full = start.clone();
    let fo = finetune_full(&mut full, data, cfg, seed, RunOptions::default())?;
    let fc = full.params().count();
    let last_val = |o: &StageOutcome| o.val_curve().last().map_or(f64::NAN, |v| v.1);
    Ok(LoraAblationResult {
        lora_trainable: lc.trainable,
        lora_total: lc.total,
        lora_fraction: lc.fraction(),
        full_fraction: fc.fraction(),
        lora_drift: probe.drift(reference, &lora)?,
        full_drift: probe.drift(reference, &full)?,
        lora_val_loss: last_val(&lo),
        full_val_loss: last_val(&fo),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GuidedFinetuneResult {
    /// Corrected-velocity error of the distilled model before fine-tuning.
    pub initial_error: f64,
    pub naive_error: f64,
    pub guided_error: f64,
}

/// Continues training a distilled model on its own latent space with the
/// naive flow objective and with the guided flow objective, then measures
/// each corrected velocity against the teacher's conditional velocity.
pub fn guided_finetune_ablation(
    distilled: &DiTModel,
    teacher: &DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    g: GuidanceRange,
    seed: u64,
) -> Result<GuidedFinetuneResult> {
    let cfg = StageConfig {
        lora: None,
        guidance: Some(g),
        ..cfg.clone()
    };
    let initial_error = corrected_velocity_error(distilled, teacher, &data.val, seed, g)?;
    let mut naive = distilled.clone();
    finetune_distilled_naive(&mut naive, data, &cfg, seed, RunOptions::default())?;
    let mut guided = distilled.clone();
    finetune_full(&mut guided, data, &cfg, seed, RunOptions::default())?;
    Ok(GuidedFinetuneResult {
        initial_error,
        naive_error: corrected_velocity_error(&naive, teacher, &data.val, seed, g)?,
        guided_error: corrected_velocity_error(&guided, teacher, &data.val, seed, g)?,
    })
}
