//! Adapt a base model from f4p2c4 to f8p2c16 with and without embedding
//! alignment, and probe the per-layer representation gap.
//!
//! Budgets are reduced from `configs/toy.toml` so this runs in a few minutes.

use dcgen::diagnostics::{layer_gap_probe, GapProbe};
use dcgen::pipeline::*;
use dcgen::{DiTModel, LatentSpec, Rng, ToyAutoencoder};

fn steps(cfg: &StageConfig, n: usize, every: usize) -> StageConfig {
    StageConfig {
        training_steps: n,
        eval_every: every,
        ..cfg.clone()
    }
}

fn autoencoder(cfg: &PipelineConfig, spec: LatentSpec, split: &DataSplit, seed: u64) -> dcgen::Result<ToyAutoencoder> {
    let mut ae = ToyAutoencoder::new(cfg.ae_config(spec), &mut Rng::new(seed))?;
    let stage = steps(&cfg.stage.train_ae, 800, 400);
    train_autoencoder(&mut ae, &split.train, &split.val, &stage, seed, RunOptions::default())?;
    Ok(ae)
}

fn main() -> dcgen::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.data.num_classes = 5;
    let split = gen_dataset(&cfg.dataset(), None)?;
    let low = LatentData::encode(&autoencoder(&cfg, cfg.latent.low, &split, 1)?, &split)?;
    let high = LatentData::encode(&autoencoder(&cfg, cfg.latent.high, &split, 2)?, &split)?;

    let mut base = DiTModel::new(cfg.dit_config(cfg.latent.low)?, &mut Rng::new(3))?;
    let run = train_base_dit(
        &mut base,
        &low,
        &steps(&cfg.stage.train_base, 1000, 500),
        3,
        RunOptions::default(),
    )?;
    println!("base val flow loss {:?}", run.outcome.val_curve().last());

    let ab = AlignmentAblation {
        align_embed: steps(&cfg.stage.align_embed, 800, 200),
        align_head: steps(&cfg.stage.align_head, 200, 100),
        finetune: steps(&cfg.stage.finetune, 300, 50),
        seed: 4,
    };
    let r = alignment_ablation(&base, cfg.latent.high, &low, &high, &ab)?;
    println!("embedder alignment loss {:?}", r.align_embed.val_curve());
    println!("{:>6} {:>10} {:>10}", "step", "aligned", "unaligned");
    for s in &r.comparison.steps {
        println!("{:>6} {:>10.4} {:>10.4}", s.step, s.a, s.b);
    }
    println!(
        "final ratio {:.3}, aligned <= unaligned throughout: {}",
        r.comparison.final_ratio, r.comparison.a_le_b_after_warmup
    );

    let idx: Vec<usize> = (0..low.val.len().min(32)).collect();
    let probe = GapProbe {
        base_latents: low.val.gather(&idx)?.0,
        adapted_latents: high.val.gather(&idx)?.0,
        class: idx.iter().map(|&i| Some(low.val.labels[i])).collect(),
        t: 1.0,
        w: 0.0,
        seed: 0,
    };
    let fresh = adapt_model(&base, cfg.latent.high, ab.seed)?;
    for (name, model) in [("random init", &fresh), ("aligned", &r.embed_aligned_model)] {
        let gap = layer_gap_probe(&base, model, &probe, cfg.probe.metric)?;
        println!("{name:>12}: per-layer gap {:?}", gap.layers);
    }
    Ok(())
}
