//! Datasets, training stages, and sampling.

pub mod ablation;
pub mod artifacts;
pub mod config;
pub mod data;
pub mod sample;
pub mod stages;
pub mod trainer;

pub use ablation::{
    alignment_ablation, guided_finetune_ablation, lora_ablation, AlignmentAblation, AlignmentAblationResult,
    GuidedFinetuneResult, LoraAblationResult, TrunkProbe,
};
pub use artifacts::{
    load_autoencoder, load_dataset, load_model, save_autoencoder, save_dataset, save_model, AeBundle, ArtifactInfo,
    ModelBundle,
};
pub use config::{
    downsample_ratio, AdaptSection, AlignmentInput, AutoencoderSection, DatasetSpec, GapMetric, GeneratorKind,
    GuidanceRange, LatentPair, LoraConfig, ModelSection, PipelineConfig, StageConfig, Stages,
};
pub use data::{gen_dataset, CentroidClassifier, DataSplit, Dataset, LatentData, LatentSet};
pub use sample::{sample_euler, sample_images, sample_latents};
pub use stages::{
    adapt_model, align_output_head, align_patch_embedder, alignment_val_loss, corrected_velocity_error,
    distill_guidance, finetune_distilled_naive, finetune_full, finetune_lora, prepare_student, reconstruction_mse,
    train_autoencoder, train_base_dit, AeOutcome, BaseOutcome, DistillValSet, FlowValSet,
};
pub use trainer::{run_stage, RunOptions, StageOutcome, Trainable};
