//! Typed configuration for datasets and training stages.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AutoencoderConfig, DitConfig, LatentSpec, DEFAULT_TARGETS};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Class-colored geometric shapes.
    Procedural,
    /// Samples of a trained base model, labeled by their conditioning class.
    BaseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub per_class: usize,
    /// Held-out samples per class, drawn from a disjoint stream.
    pub val_per_class: usize,
    pub kind: GeneratorKind,
    /// Falls back to the pipeline seed.
    pub seed: Option<u64>,
    /// Euler steps and guidance scale for the base-model generator.
    pub sample_steps: usize,
    pub sample_w: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 10,
            per_class: 100,
            val_per_class: 10,
            kind: GeneratorKind::Procedural,
            seed: None,
            sample_steps: 20,
            sample_w: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentInput {
    /// Data latents only.
    Clean,
    /// Half of every batch is replaced by noised latents at a shared `t`.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<String>,
    /// Fold adapters into the base weights when the stage completes.
    pub merge: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            merge: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceRange {
    pub w_min: f32,
    pub w_max: f32,
}

impl Default for GuidanceRange {
    fn default() -> Self {
        Self { w_min: 1.0, w_max: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub training_steps: usize,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    /// 0 disables EMA tracking.
    pub ema_decay: f32,
    /// Probability that a training sample uses the null class.
    pub cfg_dropout: f32,
    pub log_every: usize,
    /// Validation cadence; validation also runs at step 0 and the last step.
    pub eval_every: usize,
    /// Frozen-parameter check cadence.
    pub guard_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Falls back to a per-stage derivation of the pipeline seed.
    pub seed: Option<u64>,
    pub alignment_input: AlignmentInput,
    pub lora: Option<LoraConfig>,
    pub guidance: Option<GuidanceRange>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 0,
            batch_size: 32,
            training_steps: 1000,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            ema_decay: 0.0,
            cfg_dropout: 0.0,
            log_every: 50,
            eval_every: 100,
            guard_every: 50,
            checkpoint_every: 0,
            seed: None,
            alignment_input: AlignmentInput::Clean,
            lora: None,
            guidance: None,
        }
    }
}

impl StageConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
        }
    }

    /// Checks counts and that optional sections appear only where they apply.
    pub fn validate(&self, stage: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage.{stage}: {m}")));
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("training_steps", self.training_steps),
            ("log_every", self.log_every),
            ("eval_every", self.eval_every),
            ("guard_every", self.guard_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.cfg_dropout) {
            return bad("ema_decay must lie in [0, 1] and cfg_dropout in [0, 1)".into());
        }
        if self.lora.is_some() && stage != "finetune" {
            return bad("lora settings apply only to the finetune stage".into());
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 || l.targets.is_empty() {
                return bad("lora needs rank >= 1 and at least one target".into());
            }
        }
        if let Some(g) = self.guidance {
            if !["distill", "align_head", "finetune"].contains(&stage) {
                return bad("guidance range applies only to distilled-model stages".into());
            }
            if !(g.w_min >= 0.0 && g.w_max >= g.w_min) {
                return bad(format!("guidance range [{}, {}] is invalid", g.w_min, g.w_max));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentPair {
    pub low: LatentSpec,
    pub high: LatentSpec,
}

impl Default for LatentPair {
    fn default() -> Self {
        Self {
            low: LatentSpec { f: 4, p: 2, c: 4 },
            high: LatentSpec { f: 8, p: 2, c: 16 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub hidden: usize,
    /// Held-out reconstruction MSE the trained autoencoder should reach.
    pub recon_target: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            recon_target: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            freq_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// Adapt the guidance-distilled model instead of the base model.
    pub distilled: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for AdaptSection {
    fn default() -> Self {
        Self { distilled: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub train_ae: StageConfig,
    pub train_base: StageConfig,
    pub distill: StageConfig,
    pub align_embed: StageConfig,
    pub align_head: StageConfig,
    pub finetune: StageConfig,
}

impl Default for Stages {
    fn default() -> Self {
        let s = StageConfig::default();
        Self {
            train_ae: s.clone(),
            train_base: StageConfig {
                ema_decay: 0.999,
                cfg_dropout: 0.1,
                ..s.clone()
            },
            distill: StageConfig {
                guidance: Some(GuidanceRange::default()),
                ..s.clone()
            },
            align_embed: s.clone(),
            align_head: StageConfig {
                training_steps: 250,
                ..s.clone()
            },
            finetune: StageConfig {
                lora: Some(LoraConfig::default()),
                ..s
            },
        }
    }
}

impl Stages {
    pub const NAMES: [&'static str; 6] = [
        "train_ae",
        "train_base",
        "distill",
        "align_embed",
        "align_head",
        "finetune",
    ];

    pub fn get(&self, name: &str) -> Result<&StageConfig> {
        Ok(match name {
            "train_ae" => &self.train_ae,
            "train_base" => &self.train_base,
            "distill" => &self.distill,
            "align_embed" => &self.align_embed,
            "align_head" => &self.align_head,
            "finetune" => &self.finetune,
            other => return Err(Error::Config(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub w: f32,
    pub count: usize,
    /// Fixed class for every sample; cycles through classes when absent.
    pub class: Option<usize>,
    pub use_ema: bool,
    pub png: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            w: 2.0,
            count: 16,
            class: None,
            use_ema: false,
            png: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetric {
    Mse,
    /// `1 − cosine similarity`, averaged over tokens.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub batch: usize,
    /// Timestep at which probe latents are fed (1 = clean data).
    pub t: f32,
    pub metric: GapMetric,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            t: 1.0,
            metric: GapMetric::Mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub size: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            size: 128,
            repeats: 5,
            warmup: 2,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Record elapsed seconds in metrics; off makes metrics files byte-reproducible.
    pub wall_time: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self { wall_time: true }
    }
}

/// The whole multi-stage pipeline in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DatasetSpec,
    pub latent: LatentPair,
    pub autoencoder: AutoencoderSection,
    pub model: ModelSection,
    pub adapt: AdaptSection,
    pub stage: Stages,
    pub sample: SampleConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
    pub log: LogConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            data: DatasetSpec::default(),
            latent: LatentPair::default(),
            autoencoder: AutoencoderSection::default(),
            model: ModelSection::default(),
            adapt: AdaptSection::default(),
            stage: Stages::default(),
            sample: SampleConfig::default(),
            probe: ProbeConfig::default(),
            bench: BenchConfig::default(),
            log: LogConfig::default(),
        }
    }
}

fn mix(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0x6a09_e667_f3bc_c908, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for name in Stages::NAMES {
            self.stage.get(name)?.validate(name)?;
        }
        if self.data.num_classes == 0 || self.data.per_class == 0 || self.data.val_per_class == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        self.dit_config(self.latent.low)?;
        self.dit_config(self.latent.high)?;
        downsample_ratio(self.latent.low, self.latent.high)?;
        Ok(())
    }

    pub fn dataset(&self) -> DatasetSpec {
        let mut d = self.data.clone();
        d.seed = Some(d.seed.unwrap_or(mix(self.seed, "data")));
        d
    }

    pub fn stage_seed(&self, stage: &str) -> Result<u64> {
        Ok(self.stage.get(stage)?.seed.unwrap_or(mix(self.seed, stage)))
    }

    pub fn ae_config(&self, spec: LatentSpec) -> AutoencoderConfig {
        AutoencoderConfig {
            spec,
            hidden: self.autoencoder.hidden,
            image_channels: 3,
        }
    }

    pub fn dit_config(&self, spec: LatentSpec) -> Result<DitConfig> {
        let m = &self.model;
        let cfg = DitConfig {
            spec,
            image_size: (self.data.image_size, self.data.image_size),
            hidden: m.hidden,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            num_classes: self.data.num_classes,
            freq_dim: m.freq_dim,
            guidance_embed: false,
        };
        cfg.token_grid()?;
        Ok(cfg)
    }
}

/// Token-grid ratio `r = (f_high·p_high)/(f_low·p_low)` between two spaces.
pub fn downsample_ratio(low: LatentSpec, high: LatentSpec) -> Result<usize> {
    let (a, b) = (high.stride(), low.stride());
    if a < b || a % b != 0 {
        return Err(Error::SpecMismatch(format!(
            "token stride {a} of {high} is not an integer multiple of {b} of {low}"
        )));
    }
    Ok(a / b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn lora_outside_finetune_rejected() {
        let mut c = PipelineConfig::default();
        c.stage.align_head.lora = Some(LoraConfig::default());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ratio_must_be_integer() {
        let low = LatentSpec::new(4, 2, 4).unwrap();
        assert_eq!(downsample_ratio(low, LatentSpec::new(8, 2, 16).unwrap()).unwrap(), 2);
        assert_eq!(downsample_ratio(low, low).unwrap(), 1);
        assert!(matches!(
            downsample_ratio(low, LatentSpec::new(12, 1, 16).unwrap()),
            Err(Error::SpecMismatch(_))
        ));
    }
}
