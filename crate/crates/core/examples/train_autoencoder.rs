//! Procedural shapes, a per-patch autoencoder, and a reconstruction grid.
//!
//! Writes `autoencoder.png` (originals on top, reconstructions below) to the
//! directory given as the first argument, or the system temp directory.

use dcgen::io::image::{tile, write_png};
use dcgen::pipeline::*;
use dcgen::{LatentSpec, Rng, ToyAutoencoder};

fn main() -> dcgen::Result<()> {
    let out = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let cfg = PipelineConfig::default();
    let split = gen_dataset(&cfg.dataset(), None)?;
    let spec: LatentSpec = "f8p2c16".parse()?;
    let mut ae = ToyAutoencoder::new(cfg.ae_config(spec), &mut Rng::new(1))?;
    let stage = StageConfig {
        training_steps: 600,
        ..cfg.stage.train_ae.clone()
    };
    let run = train_autoencoder(&mut ae, &split.train, &split.val, &stage, 1, RunOptions::default())?;
    for (step, loss) in run.outcome.val_curve() {
        println!("step {step:4}  val mse {loss:.4}");
    }
    println!("final val mse {:.4}", reconstruction_mse(&ae, &split.val)?);

    let idx: Vec<usize> = (0..8).map(|i| i * split.val.len() / 8).collect();
    let originals = split.val.subset(&idx)?.images;
    let recon = ae.decode(&ae.encode(&originals)?)?;
    let mut cells = Vec::new();
    for batch in [&originals, &recon] {
        for i in 0..idx.len() {
            cells.push(batch.index0(i)?.map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    let path = out.join("autoencoder.png");
    write_png(&path, &tile(&cells, idx.len())?)?;
    println!("wrote {}", path.display());
    Ok(())
}
