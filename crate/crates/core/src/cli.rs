//! The `dcgen` command line: one subcommand per stage plus sampling,
//! probing, benchmarking and the paired ablations.
//!
//! Artifacts live under the output root (`--out`, else `DCGEN_OUT`, else
//! `out_dir` from the config):
//!
//! ```text
//! data.dcgn  ae_low.dcgn  ae_high.dcgn  base.dcgn  distilled.dcgn
//! align_embed.dcgn  align_head.dcgn  finetune.dcgn
//! metrics/<stage>.csv  samples/  ablate/<name>/
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::diagnostics::{bench_model, compare_runs, layer_gap_probe, BenchOptions, GapProbe, GapReport};
use crate::error::{Error, Result};
use crate::io::image::{tile, write_png, write_ppm};
use crate::io::{config_hash, load_config, MetricsRecord, MetricsWriter};
use crate::models::{DiTModel, LatentSpec, ToyAutoencoder};
use crate::optim::TrainState;
use crate::pipeline::trainer::CheckpointHook;
use crate::pipeline::{
    adapt_model, align_output_head, align_patch_embedder, alignment_ablation, distill_guidance, finetune_lora,
    gen_dataset, guided_finetune_ablation, load_autoencoder, load_dataset, load_model, lora_ablation, prepare_student,
    sample_images, save_autoencoder, save_dataset, save_model, train_autoencoder, train_base_dit, AlignmentAblation,
    ArtifactInfo, CentroidClassifier, DataSplit, GeneratorKind, LatentData, ModelBundle, PipelineConfig, RunOptions,
    StageConfig, StageOutcome, TrunkProbe,
};
use crate::rng::Rng;

#[derive(Debug, Parser)]
#[command(
    name = "dcgen",
    version,
    about = "Adapt a pretrained toy diffusion transformer to a deeply compressed latent space"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set stage.finetune.lora.rank=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output root; overrides DCGEN_OUT and `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    /// Continue from this stage's partial checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed steps and save a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Resume even if the stage configuration changed.
    #[arg(long)]
    pub allow_config_change: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Space {
    Low,
    High,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Fine-tuning with vs without embedding alignment.
    Fig2,
    /// LoRA vs full fine-tuning: trainable fraction and trunk drift.
    Fig4,
    /// Guided vs naive fine-tuning of a guidance-distilled model.
    Fig5,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural dataset (or sample one from base.dcgn).
    GenData,
    /// Train the low- and/or high-compression autoencoders.
    TrainAe {
        #[arg(long, value_enum, default_value = "both")]
        space: Space,
        #[command(flatten)]
        run: StageArgs,
    },
    /// Train the base model in the low-compression space.
    TrainBase(StageArgs),
    /// Distill classifier-free guidance into a guidance-conditioned student.
    Distill(StageArgs),
    /// Align a new patch embedder for the high-compression space.
    AlignEmbed(StageArgs),
    /// Align embedder and output head with the trunk frozen.
    AlignHead(StageArgs),
    /// LoRA fine-tuning in the high-compression space.
    Finetune(StageArgs),
    /// Sample images from a model checkpoint.
    Sample {
        /// Model checkpoint; defaults to finetune.dcgn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        w: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Per-layer gap between the pretrained and adapted pathways.
    GapProbe {
        /// Adapted model; defaults to align_embed.dcgn.
        #[arg(long)]
        adapted: Option<PathBuf>,
    },
    /// Time one forward step per latent space.
    Bench {
        /// Latent space such as `f8p2`; both configured spaces when absent.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Compare two metrics files step by step.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "val_loss")]
        column: String,
        #[arg(long, default_value_t = 0)]
        warmup: u64,
    },
    /// Run a paired ablation from existing artifacts.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
    },
}

/// Parses the process arguments, runs, and reports failures as one JSON line.
pub fn run() -> ExitCode {
    run_from(std::env::args_os())
}

pub fn run_from(args: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", json!({"kind": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

const INIT_STREAM: u64 = 0x696e_6974;

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn metrics_path(&self, name: &str) -> PathBuf {
        self.out.join("metrics").join(format!("{name}.csv"))
    }

    fn info(&self, stage: &str, completed: bool) -> Result<ArtifactInfo> {
        Ok(ArtifactInfo {
            stage: stage.to_string(),
            seed: self.cfg.stage_seed(stage)?,
            config_hash: config_hash(&self.cfg, stage)?,
            completed,
        })
    }

    fn data(&self) -> Result<DataSplit> {
        Ok(load_dataset(&self.path("data.dcgn"))?.0)
    }

    /// A finished model artifact.
    fn model(&self, name: &str) -> Result<(ModelBundle, PathBuf)> {
        let path = self.path(name);
        let b = load_model(&path)?;
        if !b.info.completed {
            return Err(Error::State(format!(
                "{} is a partial checkpoint; resume its stage first",
                path.display()
            )));
        }
        Ok((b, path))
    }

    /// The model that adaptation starts from.
    fn adapt_source(&self) -> Result<(ModelBundle, PathBuf)> {
        self.model(if self.cfg.adapt.distilled {
            "distilled.dcgn"
        } else {
            "base.dcgn"
        })
    }

    /// Stage settings for adaptation; a distilled source needs a guidance
    /// range, taken from the distillation stage when not set.
    fn adapt_cfg(&self, stage: &str) -> Result<StageConfig> {
        let mut c = self.cfg.stage.get(stage)?.clone();
        if self.cfg.adapt.distilled && c.guidance.is_none() {
            c.guidance = self.cfg.stage.distill.guidance;
        }
        Ok(c)
    }

    fn wall_time(&self) -> bool {
        self.cfg.log.wall_time
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let out = cli
        .out
        .or_else(|| std::env::var_os("DCGEN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out)?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainAe { space, run } => train_ae(&ctx, space, &run),
        Command::TrainBase(a) => train_base(&ctx, &a),
        Command::Distill(a) => distill(&ctx, &a),
        Command::AlignEmbed(a) => align_embed(&ctx, &a),
        Command::AlignHead(a) => align_head(&ctx, &a),
        Command::Finetune(a) => finetune(&ctx, &a),
        Command::Sample {
            checkpoint,
            class,
            w,
            steps,
            count,
        } => sample(&ctx, checkpoint, class, w, steps, count),
        Command::GapProbe { adapted } => gap_probe(&ctx, adapted),
        Command::Bench { spec, size, repeats } => bench(&ctx, spec, size, repeats),
        Command::Compare { a, b, column, warmup } => {
            let c = compare_runs(&a, &b, &column, warmup)?;
            emit(json!({"comparison": c, "verdicts": c.verdicts()}));
            Ok(())
        }
        Command::Ablate { which } => match which {
            Ablation::Fig2 => ablate_alignment(&ctx),
            Ablation::Fig4 => ablate_lora(&ctx),
            Ablation::Fig5 => ablate_guided(&ctx),
        },
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let spec = ctx.cfg.dataset();
    let split = match spec.kind {
        GeneratorKind::Procedural => gen_dataset(&spec, None)?,
        GeneratorKind::BaseModel => {
            let (b, path) = ctx.model("base.dcgn")?;
            let ae = b.require_ae(&path)?;
            gen_dataset(&spec, Some((&b.model, ae)))?
        }
    };
    let path = ctx.path("data.dcgn");
    let info = ArtifactInfo {
        stage: "gen_data".into(),
        seed: spec.seed.unwrap_or(ctx.cfg.seed),
        config_hash: String::new(),
        completed: true,
    };
    save_dataset(&path, &split, &spec, &info)?;
    emit(json!({"stage": "gen_data", "train": split.train.len(), "val": split.val.len(), "path": path}));
    Ok(())
}

/// What a resumable stage run starts from.
struct Start<M> {
    model: Option<M>,
    state: Option<TrainState>,
    done: bool,
}

fn check_resume(ctx: &Ctx, stage: &str, args: &StageArgs, info: &ArtifactInfo, path: &Path) -> Result<()> {
    if info.config_hash != config_hash(&ctx.cfg, stage)? && !args.allow_config_change {
        return Err(Error::Config(format!(
            "configuration of stage `{stage}` changed since {} was written; pass --allow-config-change to resume anyway",
            path.display()
        )));
    }
    Ok(())
}

fn resume_model(ctx: &Ctx, stage: &str, args: &StageArgs, path: &Path) -> Result<Start<ModelBundle>> {
    if !args.resume {
        return Ok(Start {
            model: None,
            state: None,
            done: false,
        });
    }
    if !path.exists() {
        log::warn!("no checkpoint at {}; starting `{stage}` from scratch", path.display());
        return Ok(Start {
            model: None,
            state: None,
            done: false,
        });
    }
    let mut b = load_model(path)?;
    check_resume(ctx, stage, args, &b.info, path)?;
    let done = b.info.completed;
    let state = b.state.take();
    Ok(Start {
        model: Some(b),
        state,
        done,
    })
}

fn metrics_writer(ctx: &Ctx, name: &str, state: Option<&TrainState>) -> Result<MetricsWriter> {
    let path = ctx.metrics_path(name);
    match state {
        Some(s) => MetricsWriter::resume(&path, s.step as u64),
        None => MetricsWriter::create(&path),
    }
}

fn summary(stage: &str, o: &StageOutcome, path: &Path) -> serde_json::Value {
    json!({
        "stage": stage,
        "step": o.state.step,
        "completed": o.completed,
        "loss": o.records.last().map(|r| r.loss),
        "val_loss": o.val_curve().last().map(|v| v.1),
        "freeze_checks": o.freeze_checks,
        "frozen_params": o.guarded,
        "checkpoint": path,
    })
}

/// Runs one DiT stage with resumption, metrics, periodic checkpoints, and
/// the final artifact. `fresh` builds the starting model when not resuming;
/// `body` runs the stage and may add fields to the summary.
fn dit_stage(
    ctx: &Ctx,
    stage: &str,
    file: &str,
    args: &StageArgs,
    ae: &ToyAutoencoder,
    fresh: impl FnOnce() -> Result<DiTModel>,
    body: impl FnOnce(&mut DiTModel, RunOptions<'_, DiTModel>) -> Result<(StageOutcome, serde_json::Value)>,
) -> Result<()> {
    let path = ctx.path(file);
    let start = resume_model(ctx, stage, args, &path)?;
    if start.done {
        emit(json!({"stage": stage, "completed": true, "checkpoint": path, "note": "already complete"}));
        return Ok(());
    }
    let mut model = match start.model {
        Some(b) => b.model,
        None => fresh()?,
    };
    let mut writer = metrics_writer(ctx, stage, start.state.as_ref())?;
    let partial = ctx.info(stage, false)?;
    let hook_path = path.clone();
    let hook: CheckpointHook<'_, DiTModel> =
        Box::new(move |m: &DiTModel, s: &TrainState| save_model(&hook_path, m, Some(ae), Some(s), &partial));
    let opts = RunOptions {
        metrics: Some(&mut writer),
        resume: start.state,
        stop_after: args.stop_after,
        wall_time: ctx.wall_time(),
        on_checkpoint: Some(hook),
    };
    let (outcome, extra) = body(&mut model, opts)?;
    let info = ctx.info(stage, outcome.completed)?;
    save_model(&path, &model, Some(ae), Some(&outcome.state), &info)?;
    let mut s = summary(stage, &outcome, &path);
    if let (Some(obj), serde_json::Value::Object(more)) = (s.as_object_mut(), extra) {
        obj.extend(more);
    }
    emit(s);
    Ok(())
}

fn train_ae(ctx: &Ctx, space: Space, args: &StageArgs) -> Result<()> {
    let split = ctx.data()?;
    let cfg = &ctx.cfg.stage.train_ae;
    let seed = ctx.cfg.stage_seed("train_ae")?;
    let spaces = match space {
        Space::Low => vec![("low", ctx.cfg.latent.low)],
        Space::High => vec![("high", ctx.cfg.latent.high)],
        Space::Both => vec![("low", ctx.cfg.latent.low), ("high", ctx.cfg.latent.high)],
    };
    for (k, (name, spec)) in spaces.into_iter().enumerate() {
        let label = format!("ae_{name}");
        let path = ctx.path(&format!("{label}.dcgn"));
        let space_seed = seed.wrapping_add(k as u64);
        let (mut ae, state) = match (args.resume, path.exists()) {
            (true, true) => {
                let b = load_autoencoder(&path)?;
                check_resume(ctx, "train_ae", args, &b.info, &path)?;
                if b.info.completed {
                    emit(json!({"stage": label, "completed": true, "checkpoint": path, "note": "already complete"}));
                    continue;
                }
                (b.ae, b.state)
            }
            _ => (
                ToyAutoencoder::new(ctx.cfg.ae_config(spec), &mut Rng::new(space_seed).fork(INIT_STREAM))?,
                None,
            ),
        };
        let mut writer = metrics_writer(ctx, &format!("train_ae_{name}"), state.as_ref())?;
        let partial = ctx.info("train_ae", false)?;
        let hook_path = path.clone();
        let hook: CheckpointHook<'_, ToyAutoencoder> =
            Box::new(move |m: &ToyAutoencoder, s: &TrainState| save_autoencoder(&hook_path, m, Some(s), &partial));
        let opts = RunOptions {
            metrics: Some(&mut writer),
            resume: state,
            stop_after: args.stop_after,
            wall_time: ctx.wall_time(),
            on_checkpoint: Some(hook),
        };
        let out = train_autoencoder(&mut ae, &split.train, &split.val, cfg, space_seed, opts)?;
        let info = ctx.info("train_ae", out.outcome.completed)?;
        save_autoencoder(&path, &ae, Some(&out.outcome.state), &info)?;
        let target = ctx.cfg.autoencoder.recon_target;
        if out.outcome.completed && out.val_mse >= target {
            log::warn!(
                "{label}: held-out reconstruction MSE {:.4} misses target {target}",
                out.val_mse
            );
        }
        let mut s = summary(&label, &out.outcome, &path);
        s["recon_mse"] = json!(out.val_mse);
        s["recon_target"] = json!(target);
        emit(s);
    }
    Ok(())
}

fn load_ae(ctx: &Ctx, file: &str, want: LatentSpec) -> Result<ToyAutoencoder> {
    let path = ctx.path(file);
    let b = load_autoencoder(&path)?;
    if !b.info.completed {
        return Err(Error::State(format!(
            "{} is a partial checkpoint; resume train-ae first",
            path.display()
        )));
    }
    if b.ae.spec() != want {
        return Err(Error::SpecMismatch(format!(
            "{} is for {} but the configuration expects {want}",
            path.display(),
            b.ae.spec()
        )));
    }
    Ok(b.ae)
}

fn train_base(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    let split = ctx.data()?;
    let ae = load_ae(ctx, "ae_low.dcgn", ctx.cfg.latent.low)?;
    let data = LatentData::encode(&ae, &split)?;
    let seed = ctx.cfg.stage_seed("train_base")?;
    let cfg = &ctx.cfg.stage.train_base;
    dit_stage(
        ctx,
        "train_base",
        "base.dcgn",
        args,
        &ae,
        || {
            DiTModel::new(
                ctx.cfg.dit_config(ctx.cfg.latent.low)?,
                &mut Rng::new(seed).fork(INIT_STREAM),
            )
        },
        |m, opts| {
            let o = train_base_dit(m, &data, cfg, seed, opts)?;
            Ok((o.outcome, json!({"null_fraction": o.null_fraction})))
        },
    )
}

fn distill(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    let split = ctx.data()?;
    let (teacher, path) = ctx.model("base.dcgn")?;
    let ae = teacher.require_ae(&path)?.clone();
    let data = LatentData::encode(&ae, &split)?;
    let seed = ctx.cfg.stage_seed("distill")?;
    let cfg = &ctx.cfg.stage.distill;
    dit_stage(
        ctx,
        "distill",
        "distilled.dcgn",
        args,
        &ae,
        || prepare_student(&teacher.model, seed),
        |m, opts| Ok((distill_guidance(m, &teacher.model, &data, cfg, seed, opts)?, json!({}))),
    )
}

fn paired_data(ctx: &Ctx, low_ae: &ToyAutoencoder, high_ae: &ToyAutoencoder) -> Result<(LatentData, LatentData)> {
    let split = ctx.data()?;
    Ok((
        LatentData::encode(low_ae, &split)?,
        LatentData::encode(high_ae, &split)?,
    ))
}

fn align_embed(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    let (base, base_path) = ctx.adapt_source()?;
    let low_ae = base.require_ae(&base_path)?;
    let high_ae = load_ae(ctx, "ae_high.dcgn", ctx.cfg.latent.high)?;
    let (low, high) = paired_data(ctx, low_ae, &high_ae)?;
    let seed = ctx.cfg.stage_seed("align_embed")?;
    let cfg = &ctx.cfg.stage.align_embed;
    dit_stage(
        ctx,
        "align_embed",
        "align_embed.dcgn",
        args,
        &high_ae,
        || adapt_model(&base.model, ctx.cfg.latent.high, seed),
        |m, opts| {
            Ok((
                align_patch_embedder(m, &base.model, &low, &high, cfg, seed, opts)?,
                json!({}),
            ))
        },
    )
}

/// A later adaptation stage: starts from the previous stage's artifact.
fn continue_adaptation(
    ctx: &Ctx,
    args: &StageArgs,
    stage: &str,
    prev: &str,
    run: impl FnOnce(&mut DiTModel, &LatentData, &StageConfig, u64, RunOptions<'_, DiTModel>) -> Result<StageOutcome>,
) -> Result<()> {
    let (start, prev_path) = ctx.model(prev)?;
    let ae = start.require_ae(&prev_path)?.clone();
    let data = LatentData::encode(&ae, &ctx.data()?)?;
    let seed = ctx.cfg.stage_seed(stage)?;
    let cfg = ctx.adapt_cfg(stage)?;
    dit_stage(
        ctx,
        stage,
        &format!("{stage}.dcgn"),
        args,
        &ae,
        || Ok(start.model.clone()),
        |m, opts| Ok((run(m, &data, &cfg, seed, opts)?, json!({}))),
    )
}

fn align_head(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    continue_adaptation(ctx, args, "align_head", "align_embed.dcgn", align_output_head)
}

fn finetune(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    continue_adaptation(ctx, args, "finetune", "align_head.dcgn", finetune_lora)
}

fn sample(
    ctx: &Ctx,
    checkpoint: Option<PathBuf>,
    class: Option<usize>,
    w: Option<f32>,
    steps: Option<usize>,
    count: Option<usize>,
) -> Result<()> {
    let sc = &ctx.cfg.sample;
    let path = checkpoint.unwrap_or_else(|| ctx.path("finetune.dcgn"));
    let bundle = load_model(&path)?;
    let ae = bundle.require_ae(&path)?;
    let model = if sc.use_ema {
        bundle.ema_model()?
    } else {
        bundle.model.clone()
    };
    let k = model.config().num_classes;
    let count = count.unwrap_or(sc.count);
    let class = class.or(sc.class);
    let classes: Vec<Option<usize>> = (0..count).map(|i| Some(class.unwrap_or(i % k))).collect();
    let (w, steps) = (w.unwrap_or(sc.w), steps.unwrap_or(sc.steps));
    let mut rng = Rng::new(ctx.cfg.seed).fork(0x7361_6d70);
    let images = sample_images(&model, ae, &classes, w, steps, &mut rng)?;

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let dir = ctx.path("samples");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(count);
    let mut tiles = Vec::with_capacity(count);
    for (i, c) in classes.iter().enumerate() {
        let img = images.index0(i)?;
        let f = dir.join(format!("{stem}_{i:03}_c{}.ppm", c.unwrap_or(0)));
        write_ppm(&f, &img)?;
        files.push(f);
        tiles.push(img);
    }
    let grid_cols = (count as f64).sqrt().ceil() as usize;
    let grid = tile(&tiles, grid_cols.max(1))?;
    write_ppm(&dir.join(format!("{stem}_grid.ppm")), &grid)?;
    if sc.png {
        write_png(&dir.join(format!("{stem}_grid.png")), &grid)?;
    }
    let consistency = match load_dataset(&ctx.path("data.dcgn")) {
        Ok((split, _)) => {
            let labels: Vec<usize> = classes.iter().map(|c| c.unwrap_or(0)).collect();
            Some(CentroidClassifier::fit(&split.train)?.consistency(&images, &labels)?)
        }
        Err(Error::MissingFile(_)) => None,
        Err(e) => return Err(e),
    };
    emit(json!({"samples": files.len(), "dir": dir, "w": w, "steps": steps, "class_consistency": consistency}));
    Ok(())
}

fn probe_inputs(ctx: &Ctx, low: &LatentData, high: &LatentData) -> Result<GapProbe> {
    let n = ctx.cfg.probe.batch.min(low.val.len());
    let idx: Vec<usize> = (0..n).collect();
    Ok(GapProbe {
        base_latents: low.val.gather(&idx)?.0,
        adapted_latents: high.val.gather(&idx)?.0,
        class: low.val.labels[..n].iter().map(|&c| Some(c)).collect(),
        t: ctx.cfg.probe.t,
        w: ctx.cfg.sample.w,
        seed: ctx.cfg.seed,
    })
}

fn gap_probe(ctx: &Ctx, adapted: Option<PathBuf>) -> Result<()> {
    let (base, base_path) = ctx.adapt_source()?;
    let adapted_path = adapted.unwrap_or_else(|| ctx.path("align_embed.dcgn"));
    let adapted = load_model(&adapted_path)?;
    let (low, high) = paired_data(ctx, base.require_ae(&base_path)?, adapted.require_ae(&adapted_path)?)?;
    let probe = probe_inputs(ctx, &low, &high)?;
    let metric = ctx.cfg.probe.metric;
    let aligned = layer_gap_probe(&base.model, &adapted.model, &probe, metric)?;
    let random_model = adapt_model(&base.model, adapted.model.spec(), ctx.cfg.stage_seed("align_embed")?)?;
    let random = layer_gap_probe(&base.model, &random_model, &probe, metric)?;
    let reduction = |r: &GapReport, a: &GapReport| r.first() / a.first();
    emit(json!({
        "adapted": aligned,
        "random_init": random,
        "layer1_reduction": reduction(&random, &aligned),
    }));
    Ok(())
}

fn bench(ctx: &Ctx, spec: Option<String>, size: Option<usize>, repeats: Option<usize>) -> Result<()> {
    let bc = &ctx.cfg.bench;
    let size = size.unwrap_or(bc.size);
    let opts = BenchOptions {
        batch: bc.batch,
        repeats: repeats.unwrap_or(bc.repeats),
        warmup: bc.warmup,
    };
    let arch = ctx.cfg.dit_config(ctx.cfg.latent.low)?;
    let specs = match spec {
        Some(s) => vec![s.parse::<LatentSpec>()?],
        None => vec![ctx.cfg.latent.low, ctx.cfg.latent.high],
    };
    let records = specs
        .into_iter()
        .map(|s| bench_model(&arch, s, size, opts, ctx.cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let speedup = (records.len() == 2).then(|| records[0].step_time_s / records[1].step_time_s);
    emit(json!({"records": records, "speedup": speedup}));
    Ok(())
}

fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    records.iter().try_for_each(|r| w.write(r))
}

fn ablate_alignment(ctx: &Ctx) -> Result<()> {
    let (base, base_path) = ctx.adapt_source()?;
    let high_ae = load_ae(ctx, "ae_high.dcgn", ctx.cfg.latent.high)?;
    let (low, high) = paired_data(ctx, base.require_ae(&base_path)?, &high_ae)?;
    let cfg = AlignmentAblation {
        align_embed: ctx.cfg.stage.align_embed.clone(),
        align_head: ctx.adapt_cfg("align_head")?,
        finetune: ctx.adapt_cfg("finetune")?,
        seed: ctx.cfg.stage_seed("finetune")?,
    };
    let r = alignment_ablation(&base.model, ctx.cfg.latent.high, &low, &high, &cfg)?;
    let dir = ctx.path("ablate/fig2");
    let (a, b) = (dir.join("aligned.csv"), dir.join("unaligned.csv"));
    write_records(&a, &r.aligned.records)?;
    write_records(&b, &r.unaligned.records)?;
    let c = compare_runs(&a, &b, "val_loss", cfg.finetune.warmup_steps)?;
    emit(json!({"ablation": "fig2", "aligned": a, "unaligned": b, "comparison": c, "verdicts": c.verdicts()}));
    Ok(())
}

fn ablate_lora(ctx: &Ctx) -> Result<()> {
    let (base, base_path) = ctx.adapt_source()?;
    let (start, start_path) = ctx.model("align_head.dcgn")?;
    let split = ctx.data()?;
    let low = LatentData::encode(base.require_ae(&base_path)?, &split)?;
    let high = LatentData::encode(start.require_ae(&start_path)?, &split)?;
    let probe = TrunkProbe::new(&base.model, &low.val, ctx.cfg.probe.batch, 0.5)?;
    let cfg = ctx.adapt_cfg("finetune")?;
    let r = lora_ablation(
        &start.model,
        &base.model,
        &high,
        &cfg,
        &probe,
        ctx.cfg.stage_seed("finetune")?,
    )?;
    emit(json!({"ablation": "fig4", "result": r, "lora_drifts_less": r.lora_drift < r.full_drift}));
    Ok(())
}

fn ablate_guided(ctx: &Ctx) -> Result<()> {
    let (teacher, path) = ctx.model("base.dcgn")?;
    let (distilled, _) = ctx.model("distilled.dcgn")?;
    let data = LatentData::encode(teacher.require_ae(&path)?, &ctx.data()?)?;
    let g = ctx
        .cfg
        .stage
        .distill
        .guidance
        .ok_or_else(|| Error::Config("stage.distill.guidance is required".into()))?;
    let r = guided_finetune_ablation(
        &distilled.model,
        &teacher.model,
        &data,
        &ctx.cfg.stage.finetune,
        g,
        ctx.cfg.stage_seed("finetune")?,
    )?;
    emit(json!({"ablation": "fig5", "result": r, "guided_not_worse": r.guided_error <= r.naive_error}));
    Ok(())
}
