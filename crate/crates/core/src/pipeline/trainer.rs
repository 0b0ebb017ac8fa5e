//! The step loop shared by every training stage.
//!
//! Each step draws from its own stream `Rng::new(seed).fork(step)`, so a run
//! resumed from a saved [`TrainState`] replays exactly the draws of an
//! uninterrupted one.

use std::time::Instant;

use super::config::StageConfig;
use crate::error::{Error, Result};
use crate::io::{MetricsRecord, MetricsWriter};
use crate::models::{Binding, DiTModel, FreezeGuard, ParamStore, ToyAutoencoder};
use crate::optim::{AdamW, Ema, TrainState};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// A model whose parameters live in one [`ParamStore`].
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for DiTModel {
    fn store(&self) -> &ParamStore {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

impl Trainable for ToyAutoencoder {
    fn store(&self) -> &ParamStore {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

pub type CheckpointHook<'a, M> = Box<dyn FnMut(&M, &TrainState) -> Result<()> + 'a>;

/// Side channels of a stage run.
pub struct RunOptions<'a, M> {
    pub metrics: Option<&'a mut MetricsWriter>,
    /// Continue from a saved state instead of starting at step 0.
    pub resume: Option<TrainState>,
    /// Return early once this many steps are complete.
    pub stop_after: Option<usize>,
    pub wall_time: bool,
    /// Called every `checkpoint_every` steps before the final one.
    pub on_checkpoint: Option<CheckpointHook<'a, M>>,
}

impl<M> Default for RunOptions<'_, M> {
    fn default() -> Self {
        Self {
            metrics: None,
            resume: None,
            stop_after: None,
            wall_time: false,
            on_checkpoint: None,
        }
    }
}

impl<'a, M> RunOptions<'a, M> {
    pub fn with_metrics(mut self, w: &'a mut MetricsWriter) -> Self {
        self.metrics = Some(w);
        self
    }

    pub fn resume(mut self, state: TrainState) -> Self {
        self.resume = Some(state);
        self
    }

    pub fn stop_after(mut self, steps: usize) -> Self {
        self.stop_after = Some(steps);
        self
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    /// Frozen-parameter checks performed (each one passed).
    pub freeze_checks: usize,
    /// Frozen parameters under guard.
    pub guarded: usize,
    pub completed: bool,
}

impl StageOutcome {
    /// `val_loss` extras in logging order, paired with their step.
    pub fn val_curve(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.extra("val_loss").map(|v| (r.step, v)))
            .collect()
    }
}

fn diverged(stage: &str, step: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric { .. } => Error::Training {
            stage: stage.to_string(),
            step,
        },
        other => other,
    }
}

/// Runs `cfg.training_steps` optimizer steps of `loss_fn` on the unfrozen
/// parameters of `model`, checking frozen ones every `guard_every` steps.
pub fn run_stage<M: Trainable>(
    stage: &str,
    model: &mut M,
    cfg: &StageConfig,
    seed: u64,
    mut opts: RunOptions<'_, M>,
    mut loss_fn: impl FnMut(&M, &mut Tape, &Binding, &mut Rng) -> Result<Var>,
    mut val_fn: Option<&mut dyn FnMut(&M) -> Result<f64>>,
) -> Result<StageOutcome> {
    cfg.validate(stage)?;
    let total = cfg.training_steps;
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.step > total {
                return Err(Error::State(format!(
                    "saved state is at step {} but stage `{stage}` has {total} steps",
                    s.step
                )));
            }
            s
        }
        None => TrainState {
            step: 0,
            opt: AdamW::new(cfg.adamw()),
            ema: (cfg.ema_decay > 0.0).then(|| Ema::new(cfg.ema_decay)),
            window: (0.0, 0),
        },
    };
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let mut guard = FreezeGuard::new(model.store());
    let root = Rng::new(seed);
    let clock = Instant::now();
    let mut records = Vec::new();

    let mut emit = |rec: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        let rec = MetricsRecord {
            wall_time_s: if opts.wall_time {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            },
            ..rec
        };
        if let Some(w) = opts.metrics.as_deref_mut() {
            w.write(&rec)?;
        }
        records.push(rec);
        Ok(())
    };

    while state.step < end {
        let step = state.step;
        let mut rng = root.fork(step as u64);
        let mut tape = Tape::new();
        let bind = model.store().bind(&mut tape);
        let loss = loss_fn(model, &mut tape, &bind, &mut rng).map_err(diverged(stage, step))?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                stage: stage.to_string(),
                step,
            });
        }
        if step == 0 {
            let mut rec = MetricsRecord::new(0, stage, value, state.opt.lr_at(1) as f64);
            if let Some(v) = val_fn.as_mut() {
                rec = rec.with_extra("val_loss", v(model)?);
            }
            emit(rec, &mut records)?;
        }
        let mut grads = tape.backward(loss).map_err(diverged(stage, step))?;
        drop(tape);
        model.store_mut().apply_grads(&mut state.opt, &bind, &mut grads)?;
        if let Some(ema) = state.ema.as_mut() {
            model.store().update_ema(ema)?;
        }
        state.step += 1;
        let s = state.step;
        state.window.0 += value;
        state.window.1 += 1;

        if s % cfg.guard_every == 0 || s == end {
            guard.check(model.store())?;
        }
        let eval = s % cfg.eval_every == 0 || s == total;
        if s % cfg.log_every == 0 || eval {
            let (sum, n) = state.window;
            let mut rec = MetricsRecord::new(s as u64, stage, sum / n as f64, state.opt.current_lr() as f64);
            if eval {
                if let Some(v) = val_fn.as_mut() {
                    rec = rec.with_extra("val_loss", v(model)?);
                }
            }
            emit(rec, &mut records)?;
            state.window = (0.0, 0);
        }
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s < total {
            if let Some(hook) = opts.on_checkpoint.as_mut() {
                hook(model, &state)?;
            }
        }
    }
    if end == state.step && guard.checks() == 0 {
        guard.check(model.store())?;
    }
    Ok(StageOutcome {
        completed: state.step == total,
        freeze_checks: guard.checks(),
        guarded: guard.guarded(),
        state,
        records,
    })
}
