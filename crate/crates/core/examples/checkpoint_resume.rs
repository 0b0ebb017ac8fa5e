//! Interrupt a training stage, checkpoint it to disk, and resume it; the
//! result matches an uninterrupted run bit for bit.

use dcgen::pipeline::*;
use dcgen::{Rng, ToyAutoencoder};

fn main() -> dcgen::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.data.num_classes = 3;
    cfg.data.per_class = 20;
    let split = gen_dataset(&cfg.dataset(), None)?;
    let stage = StageConfig {
        training_steps: 60,
        eval_every: 20,
        ..cfg.stage.train_ae.clone()
    };
    let fresh = ToyAutoencoder::new(cfg.ae_config(cfg.latent.low), &mut Rng::new(7))?;

    let mut whole = fresh.clone();
    train_autoencoder(&mut whole, &split.train, &split.val, &stage, 7, RunOptions::default())?;

    let dir = std::env::temp_dir().join(format!("dcgen-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ae_low.dcgn");
    let info = |completed| ArtifactInfo {
        stage: "train_ae".into(),
        seed: 7,
        config_hash: String::new(),
        completed,
    };
    let mut part = fresh;
    let first = train_autoencoder(
        &mut part,
        &split.train,
        &split.val,
        &stage,
        7,
        RunOptions::default().stop_after(25),
    )?;
    save_autoencoder(&path, &part, Some(&first.outcome.state), &info(false))?;
    println!("stopped at step {} -> {}", first.outcome.state.step, path.display());

    let bundle = load_autoencoder(&path)?;
    let mut resumed = bundle.ae;
    let state = bundle.state.expect("partial checkpoint carries its state");
    let rest = train_autoencoder(
        &mut resumed,
        &split.train,
        &split.val,
        &stage,
        7,
        RunOptions::default().resume(state),
    )?;
    save_autoencoder(&path, &resumed, None, &info(rest.outcome.completed))?;

    let same = resumed.params().matches_bitwise(&whole.params().snapshot(|_, _| true));
    println!(
        "resumed to step {}; bitwise equal to uninterrupted run: {same}",
        rest.outcome.state.step
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
