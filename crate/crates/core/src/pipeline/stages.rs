//! Training stages: autoencoders, base model, guidance distillation, and
//! the three adaptation stages (embedder alignment, head alignment,
//! LoRA fine-tuning).

use std::cell::Cell;

use super::config::{downsample_ratio, AlignmentInput, GuidanceRange, StageConfig};
use super::data::{Dataset, LatentData, LatentSet};
use super::trainer::{run_stage, RunOptions, StageOutcome};
use crate::error::{contract, Error, Result};
use crate::models::{Binding, Conditioning, DiTModel, Group, ToyAutoencoder};
use crate::objectives::{
    alignment_loss, corrected_prediction, distill_loss, flow_matching_loss, guide_flow_matching_loss, make_flow_sample,
    teacher_guided_velocity, FlowBatch, FlowSample, GuidanceBatch,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const VAL_STREAM: u64 = 0x0076_616c;
const LORA_STREAM: u64 = 0x6c6f_7261;
const STUDENT_STREAM: u64 = 0x0073_7475;
const ADAPT_STREAM: u64 = 0x6164_6170;

/// Mean over chunks of a per-batch mean-square error, weighted by chunk size.
fn chunked_mean(n: usize, chunk: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        acc += f(start, end)? * (end - start) as f64;
        start = end;
    }
    Ok(acc / n as f64)
}

/// Random training indices for one batch.
fn draw_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}

fn flow_batch(set: &LatentSet, idx: &[usize], rng: &mut Rng) -> Result<FlowBatch> {
    let samples: Vec<FlowSample> = idx
        .iter()
        .map(|&i| Ok(make_flow_sample(&set.latent(i)?, rng)))
        .collect::<Result<_>>()?;
    FlowBatch::from_samples(&samples)
}

fn classes_with_dropout(set: &LatentSet, idx: &[usize], p: f32, rng: &mut Rng) -> Vec<Option<usize>> {
    idx.iter()
        .map(|&i| {
            if p > 0.0 && rng.bernoulli(p) {
                None
            } else {
                Some(set.labels[i])
            }
        })
        .collect()
}

fn guidance_scales(n: usize, g: GuidanceRange, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.uniform_in(g.w_min, g.w_max)).collect()
}

fn need_guidance(cfg: &StageConfig, stage: &str) -> Result<GuidanceRange> {
    cfg.guidance.ok_or_else(|| {
        Error::Config(format!(
            "stage.{stage}.guidance is required for a guidance-distilled model"
        ))
    })
}

/// Fixed held-out flow samples: one per validation latent, with noise, `t`
/// and (for distilled models) `w` drawn from a dedicated stream.
#[derive(Clone, Debug)]
pub struct FlowValSet {
    pub flow: FlowBatch,
    pub class: Vec<Option<usize>>,
    pub w: Option<Vec<f32>>,
}

impl FlowValSet {
    pub fn new(set: &LatentSet, seed: u64, guidance: Option<GuidanceRange>) -> Result<Self> {
        let mut rng = Rng::new(seed).fork(VAL_STREAM);
        let idx: Vec<usize> = (0..set.len()).collect();
        let flow = flow_batch(set, &idx, &mut rng)?;
        let w = guidance.map(|g| guidance_scales(set.len(), g, &mut rng));
        Ok(Self {
            flow,
            class: set.labels.iter().map(|&c| Some(c)).collect(),
            w,
        })
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    fn slice(&self, start: usize, end: usize) -> Result<(FlowBatch, Vec<Option<usize>>, Option<Vec<f32>>)> {
        let rows = |t: &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = (start..end).map(|i| t.index0(i)).collect::<Result<_>>()?;
            Tensor::stack(&parts)
        };
        Ok((
            FlowBatch {
                x_t: rows(&self.flow.x_t)?,
                v_t: rows(&self.flow.v_t)?,
                t: self.flow.t[start..end].to_vec(),
            },
            self.class[start..end].to_vec(),
            self.w.as_ref().map(|w| w[start..end].to_vec()),
        ))
    }

    /// Flow-matching loss of a plain model, or guided flow-matching loss
    /// (corrected velocity against `v_t`) of a distilled one.
    pub fn loss(&self, model: &DiTModel) -> Result<f64> {
        chunked_mean(self.len(), 64, |s, e| {
            let (flow, class, w) = self.slice(s, e)?;
            let mut tape = Tape::new();
            let bind = model.params().bind_constant(&mut tape);
            let loss = match (&w, model.is_guidance_distilled()) {
                (Some(w), true) => {
                    let batch = GuidanceBatch::new(flow, class.clone(), w.clone())?;
                    guide_flow_matching_loss(model, &mut tape, &bind, &batch)?
                }
                (None, false) => flow_matching_loss(model, &mut tape, &bind, &flow, &class, None)?,
                _ => return Err(contract!("validation set and model disagree on guidance conditioning")),
            };
            Ok(tape.value(loss).item()? as f64)
        })
    }
}

/// Training loss shared by the head-alignment and fine-tuning stages.
fn adaptation_loss(
    model: &DiTModel,
    tape: &mut Tape,
    bind: &Binding,
    set: &LatentSet,
    cfg: &StageConfig,
    stage: &str,
    rng: &mut Rng,
) -> Result<Var> {
    let idx = draw_indices(set.len(), cfg.batch_size, rng);
    let flow = flow_batch(set, &idx, rng)?;
    if model.is_guidance_distilled() {
        let g = need_guidance(cfg, stage)?;
        let w = guidance_scales(idx.len(), g, rng);
        let labels = idx.iter().map(|&i| Some(set.labels[i])).collect();
        let batch = GuidanceBatch::new(flow, labels, w)?;
        guide_flow_matching_loss(model, tape, bind, &batch)
    } else {
        let class = classes_with_dropout(set, &idx, cfg.cfg_dropout, rng);
        flow_matching_loss(model, tape, bind, &flow, &class, None)
    }
}

fn val_set_for(model: &DiTModel, data: &LatentData, cfg: &StageConfig, stage: &str, seed: u64) -> Result<FlowValSet> {
    let g = if model.is_guidance_distilled() {
        Some(need_guidance(cfg, stage)?)
    } else {
        None
    };
    FlowValSet::new(&data.val, seed, g)
}

#[derive(Clone, Debug)]
pub struct AeOutcome {
    pub outcome: StageOutcome,
    /// Held-out pixel MSE after training.
    pub val_mse: f64,
}

/// Held-out reconstruction MSE of `decode(encode(x))`.
pub fn reconstruction_mse(ae: &ToyAutoencoder, data: &Dataset) -> Result<f64> {
    chunked_mean(data.len(), 128, |s, e| {
        let idx: Vec<usize> = (s..e).collect();
        let x = data.subset(&idx)?.images;
        let rec = ae.decode(&ae.encode(&x)?)?;
        rec.mse(&x)
    })
}

/// Trains encoder and decoder on pixel MSE, then sets the latent
/// standardization from the training set.
pub fn train_autoencoder(
    ae: &mut ToyAutoencoder,
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, ToyAutoencoder>,
) -> Result<AeOutcome> {
    let f = ae.spec().f;
    let s = train.images.shape();
    if !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
        return Err(Error::SpecMismatch(format!(
            "{}x{} images are not divisible by f={f}",
            s[2], s[3]
        )));
    }
    ae.params_mut()
        .set_trainable(|_, g| matches!(g, Group::Encoder | Group::Decoder));
    let val_small: Vec<usize> = (0..val.len().min(128)).collect();
    let val_small = val.subset(&val_small)?;
    let mut val_fn = |m: &ToyAutoencoder| reconstruction_mse(m, &val_small);
    let outcome = run_stage(
        "train_ae",
        ae,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| {
            let idx = draw_indices(train.len(), cfg.batch_size, rng);
            let x = tape.constant(train.subset(&idx)?.images);
            let z = m.encode_var(tape, bind, x)?;
            let y = m.decode_var(tape, bind, z)?;
            tape.mse(y, x)
        },
        Some(&mut val_fn),
    )?;
    let raw = super::data::concat(
        &(0..train.len())
            .step_by(256)
            .map(|s| {
                let idx: Vec<usize> = (s..(s + 256).min(train.len())).collect();
                ae.encode_raw(&train.subset(&idx)?.images)
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    ae.calibrate(&raw)?;
    let val_mse = reconstruction_mse(ae, val)?;
    Ok(AeOutcome { outcome, val_mse })
}

#[derive(Clone, Debug)]
pub struct BaseOutcome {
    pub outcome: StageOutcome,
    /// Fraction of training samples that used the null class.
    pub null_fraction: f64,
}

/// Flow-matching training of every model parameter, with per-sample
/// null-class dropout for classifier-free guidance.
pub fn train_base_dit(
    model: &mut DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<BaseOutcome> {
    if model.is_guidance_distilled() {
        return Err(Error::State(
            "base training expects a model without guidance embedding".into(),
        ));
    }
    model.params_mut().set_trainable(|_, g| g != Group::Lora);
    let val = FlowValSet::new(&data.val, seed, None)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    let (nulls, total) = (Cell::new(0usize), Cell::new(0usize));
    let outcome = run_stage(
        "train_base",
        model,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| {
            let idx = draw_indices(data.train.len(), cfg.batch_size, rng);
            let flow = flow_batch(&data.train, &idx, rng)?;
            let class = classes_with_dropout(&data.train, &idx, cfg.cfg_dropout, rng);
            nulls.set(nulls.get() + class.iter().filter(|c| c.is_none()).count());
            total.set(total.get() + class.len());
            flow_matching_loss(m, tape, bind, &flow, &class, None)
        },
        Some(&mut val_fn),
    )?;
    Ok(BaseOutcome {
        outcome,
        null_fraction: nulls.get() as f64 / total.get().max(1) as f64,
    })
}

/// A copy of `teacher` with a fresh guidance embedding. Its output equals the
/// teacher's conditional output until trained.
pub fn prepare_student(teacher: &DiTModel, seed: u64) -> Result<DiTModel> {
    let mut student = teacher.clone();
    student.enable_guidance_embedding(&mut Rng::new(seed).fork(STUDENT_STREAM))?;
    Ok(student)
}

/// Fixed distillation probe: validation latents with fixed noise, `t`, `w`
/// and the teacher's guided velocity as target.
pub struct DistillValSet {
    batch: GuidanceBatch,
    target: Tensor,
}

impl DistillValSet {
    pub fn new(teacher: &DiTModel, set: &LatentSet, seed: u64, g: GuidanceRange) -> Result<Self> {
        let v = FlowValSet::new(set, seed, Some(g))?;
        let labels = set.labels.clone();
        let batch = GuidanceBatch::new(
            v.flow,
            labels.into_iter().map(Some).collect(),
            v.w.expect("guidance set"),
        )?;
        let target = teacher_guided_velocity(teacher, &batch)?;
        Ok(Self { batch, target })
    }

    pub fn loss(&self, student: &DiTModel) -> Result<f64> {
        let classes = &self.batch.class;
        let cond = Conditioning {
            t: &self.batch.flow.t,
            class: classes,
            w: Some(&self.batch.w),
        };
        student.predict(&self.batch.flow.x_t, &cond)?.mse(&self.target)
    }
}

/// Trains `student` to emit the teacher's guided velocity for `w` drawn from
/// the configured range. Null-class samples (rate `cfg_dropout`) teach the
/// unconditional branch. The teacher is checked bitwise at the end.
pub fn distill_guidance(
    student: &mut DiTModel,
    teacher: &DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    if !student.is_guidance_distilled() {
        return Err(Error::State(
            "student needs a guidance embedding; see prepare_student".into(),
        ));
    }
    if teacher.is_guidance_distilled() {
        return Err(Error::State(
            "teacher must be a plain classifier-free-guidance model".into(),
        ));
    }
    let g = need_guidance(cfg, "distill")?;
    let teacher_before = teacher.params().snapshot(|_, _| true);
    student.params_mut().set_trainable(|_, grp| grp != Group::Lora);
    let val = DistillValSet::new(teacher, &data.val, seed, g)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    let outcome = run_stage(
        "distill",
        student,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| {
            let idx = draw_indices(data.train.len(), cfg.batch_size, rng);
            let flow = flow_batch(&data.train, &idx, rng)?;
            let class = classes_with_dropout(&data.train, &idx, cfg.cfg_dropout, rng);
            let w = guidance_scales(idx.len(), g, rng);
            let batch = GuidanceBatch::new(flow, class, w)?;
            distill_loss(m, tape, bind, teacher, &batch)
        },
        Some(&mut val_fn),
    )?;
    if !teacher.params().matches_bitwise(&teacher_before) {
        return Err(Error::Internal("teacher parameters changed during distillation".into()));
    }
    Ok(outcome)
}

/// The pretrained model with embedder and head replaced by random ones for
/// `spec`; trunk, conditioning and guidance weights are shared.
pub fn adapt_model(base: &DiTModel, spec: crate::models::LatentSpec, seed: u64) -> Result<DiTModel> {
    let mut m = base.clone();
    m.replace_latent_modules(spec, &mut Rng::new(seed).fork(ADAPT_STREAM))?;
    Ok(m)
}

fn check_pair(base: &DiTModel, adapted: &DiTModel, low: &LatentSet, high: &LatentSet) -> Result<usize> {
    let r = downsample_ratio(base.spec(), adapted.spec())?;
    let (b, a) = (base.config(), adapted.config());
    if b.hidden != a.hidden || b.image_size != a.image_size {
        return Err(contract!("models disagree on hidden width or image size"));
    }
    if low.len() != high.len() || low.labels != high.labels {
        return Err(contract!("latent sets are not paired index-by-index"));
    }
    Ok(r)
}

/// Alignment loss between the adapted embedder on `high` latents and the
/// pooled pretrained embedding of the paired `low` latents.
fn embed_alignment(
    adapted: &DiTModel,
    base: &DiTModel,
    tape: &mut Tape,
    bind: &Binding,
    x_low: Tensor,
    x_high: Tensor,
    r: usize,
) -> Result<Var> {
    let base_bind = base.params().bind_constant(tape);
    let xl = tape.constant(x_low);
    let e = base.embed(tape, &base_bind, xl)?;
    let xh = tape.constant(x_high);
    let e_phi = adapted.embed(tape, bind, xh)?;
    alignment_loss(tape, e_phi, e, r)
}

/// Noised copy `(1−t)·n + t·x` with fresh noise.
fn noised(x: &Tensor, t: f32, rng: &mut Rng) -> Result<Tensor> {
    let n = Tensor::randn(x.shape(), 1.0, rng);
    Ok(FlowSample::at(x, &n, t)?.x_t)
}

/// Held-out alignment loss on clean paired latents.
pub fn alignment_val_loss(adapted: &DiTModel, base: &DiTModel, low: &LatentSet, high: &LatentSet) -> Result<f64> {
    let r = check_pair(base, adapted, low, high)?;
    chunked_mean(low.len(), 128, |s, e| {
        let idx: Vec<usize> = (s..e).collect();
        let mut tape = Tape::new();
        let bind = adapted.params().bind_constant(&mut tape);
        let loss = embed_alignment(
            adapted,
            base,
            &mut tape,
            &bind,
            low.gather(&idx)?.0,
            high.gather(&idx)?.0,
            r,
        )?;
        Ok(tape.value(loss).item()? as f64)
    })
}

/// Trains only the adapted embedder (projection and positions) so that its
/// output matches the spatially pooled pretrained embedding.
pub fn align_patch_embedder(
    adapted: &mut DiTModel,
    base: &DiTModel,
    low: &LatentData,
    high: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    let r = check_pair(base, adapted, &low.train, &high.train)?;
    check_pair(base, adapted, &low.val, &high.val)?;
    adapted.params_mut().set_trainable(|_, g| g == Group::Embedder);
    let mut val_fn = |m: &DiTModel| alignment_val_loss(m, base, &low.val, &high.val);
    run_stage(
        "align_embed",
        adapted,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| {
            let idx = draw_indices(low.train.len(), cfg.batch_size, rng);
            let (mut xl, _) = low.train.gather(&idx)?;
            let (mut xh, _) = high.train.gather(&idx)?;
            if cfg.alignment_input == AlignmentInput::Mixed {
                let half = idx.len() / 2;
                let mut ls = Vec::with_capacity(idx.len());
                let mut hs = Vec::with_capacity(idx.len());
                for i in 0..idx.len() {
                    let (l, h) = (xl.index0(i)?, xh.index0(i)?);
                    if i < half {
                        let t = rng.uniform();
                        ls.push(noised(&l, t, rng)?);
                        hs.push(noised(&h, t, rng)?);
                    } else {
                        ls.push(l);
                        hs.push(h);
                    }
                }
                xl = Tensor::stack(&ls)?;
                xh = Tensor::stack(&hs)?;
            }
            embed_alignment(m, base, tape, bind, xl, xh, r)
        },
        Some(&mut val_fn),
    )
}

/// Trains embedder and head on the flow objective (guided flow objective for
/// a distilled model) with everything else frozen.
pub fn align_output_head(
    model: &mut DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    model
        .params_mut()
        .set_trainable(|_, g| matches!(g, Group::Embedder | Group::Head));
    let val = val_set_for(model, data, cfg, "align_head", seed)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    run_stage(
        "align_head",
        model,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| adaptation_loss(m, tape, bind, &data.train, cfg, "align_head", rng),
        Some(&mut val_fn),
    )
}

/// End-to-end fine-tuning through LoRA adapters on the trunk projections,
/// with embedder and head fully trainable. Adapters are attached unless the
/// model already carries them (a resumed run); with `lora.merge` they are
/// folded in once the stage completes.
pub fn finetune_lora(
    model: &mut DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    let lora = cfg
        .lora
        .as_ref()
        .ok_or_else(|| Error::Config("stage.finetune.lora is required for LoRA fine-tuning".into()))?;
    if model.adapters().is_empty() {
        model.attach_lora(
            &lora.targets,
            lora.rank,
            lora.alpha,
            &mut Rng::new(seed).fork(LORA_STREAM),
        )?;
    }
    model
        .params_mut()
        .set_trainable(|_, g| matches!(g, Group::Lora | Group::Embedder | Group::Head));
    let val = val_set_for(model, data, cfg, "finetune", seed)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    let outcome = run_stage(
        "finetune",
        model,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| adaptation_loss(m, tape, bind, &data.train, cfg, "finetune", rng),
        Some(&mut val_fn),
    )?;
    if outcome.completed && lora.merge {
        model.merge_lora()?;
    }
    Ok(outcome)
}

/// End-to-end fine-tuning of every parameter (the comparison point for LoRA).
pub fn finetune_full(
    model: &mut DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    model.params_mut().set_trainable(|_, g| g != Group::Lora);
    let val = val_set_for(model, data, cfg, "finetune", seed)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    let stage_cfg = StageConfig {
        lora: None,
        ..cfg.clone()
    };
    run_stage(
        "finetune",
        model,
        &stage_cfg,
        seed,
        opts,
        |m, tape, bind, rng| adaptation_loss(m, tape, bind, &data.train, &stage_cfg, "finetune", rng),
        Some(&mut val_fn),
    )
}

/// Mean `‖v̂ − v_ref‖²` between a distilled model's corrected velocity and a
/// reference conditional velocity (the teacher's), on fixed validation
/// samples with guidance scales from `g`.
pub fn corrected_velocity_error(
    distilled: &DiTModel,
    teacher: &DiTModel,
    set: &LatentSet,
    seed: u64,
    g: GuidanceRange,
) -> Result<f64> {
    let v = FlowValSet::new(set, seed, Some(g))?;
    chunked_mean(v.len(), 64, |s, e| {
        let (flow, class, w) = v.slice(s, e)?;
        let w = w.expect("guidance set");
        let reference = teacher.predict(
            &flow.x_t,
            &Conditioning {
                t: &flow.t,
                class: &class,
                w: None,
            },
        )?;
        let batch = GuidanceBatch::new(flow, class, w)?;
        let mut tape = Tape::new();
        let bind = distilled.params().bind_constant(&mut tape);
        let v_hat = corrected_prediction(distilled, &mut tape, &bind, &batch)?;
        tape.value(v_hat).mse(&reference)
    })
}

/// Continues training a distilled model on the naive flow objective
/// (`v_η(x_t, c, t, w)` regressed directly on `v_t`), the baseline that the
/// guided flow objective corrects.
pub fn finetune_distilled_naive(
    model: &mut DiTModel,
    data: &LatentData,
    cfg: &StageConfig,
    seed: u64,
    opts: RunOptions<'_, DiTModel>,
) -> Result<StageOutcome> {
    if !model.is_guidance_distilled() {
        return Err(Error::State(
            "naive distilled fine-tuning needs a guidance-distilled model".into(),
        ));
    }
    let g = need_guidance(cfg, "finetune")?;
    model.params_mut().set_trainable(|_, grp| grp != Group::Lora);
    let val = val_set_for(model, data, cfg, "finetune", seed)?;
    let mut val_fn = |m: &DiTModel| val.loss(m);
    run_stage(
        "finetune",
        model,
        cfg,
        seed,
        opts,
        |m, tape, bind, rng| {
            let idx = draw_indices(data.train.len(), cfg.batch_size, rng);
            let flow = flow_batch(&data.train, &idx, rng)?;
            let w = guidance_scales(idx.len(), g, rng);
            let class: Vec<Option<usize>> = idx.iter().map(|&i| Some(data.train.labels[i])).collect();
            flow_matching_loss(m, tape, bind, &flow, &class, Some(&w))
        },
        Some(&mut val_fn),
    )
}
