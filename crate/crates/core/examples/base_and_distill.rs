//! Train a small base model in the low-compression space, sample from it
//! with guidance, then distill guidance into a single-pass student.

use dcgen::pipeline::*;
use dcgen::{DiTModel, Rng};

fn main() -> dcgen::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.data.num_classes = 4;
    cfg.data.per_class = 50;
    let split = gen_dataset(&cfg.dataset(), None)?;
    let mut ae = dcgen::ToyAutoencoder::new(cfg.ae_config(cfg.latent.low), &mut Rng::new(1))?;
    let ae_stage = StageConfig {
        training_steps: 600,
        ..cfg.stage.train_ae.clone()
    };
    train_autoencoder(&mut ae, &split.train, &split.val, &ae_stage, 1, RunOptions::default())?;
    let data = LatentData::encode(&ae, &split)?;

    let mut base = DiTModel::new(cfg.dit_config(cfg.latent.low)?, &mut Rng::new(2))?;
    let base_stage = StageConfig {
        training_steps: 800,
        eval_every: 200,
        ..cfg.stage.train_base.clone()
    };
    let run = train_base_dit(&mut base, &data, &base_stage, 2, RunOptions::default())?;
    for (step, loss) in run.outcome.val_curve() {
        println!("base step {step:4}  val flow loss {loss:.4}");
    }
    println!("null-label fraction {:.3}", run.null_fraction);

    let classifier = CentroidClassifier::fit(&split.train)?;
    let labels: Vec<usize> = (0..16).map(|i| i % cfg.data.num_classes).collect();
    let classes: Vec<_> = labels.iter().map(|&c| Some(c)).collect();
    for w in [0.0, 2.0] {
        let images = sample_images(&base, &ae, &classes, w, 20, &mut Rng::new(3))?;
        println!(
            "w={w}: class consistency {:.3}",
            classifier.consistency(&images, &labels)?
        );
    }

    let mut student = prepare_student(&base, 4)?;
    let distill = StageConfig {
        training_steps: 300,
        eval_every: 100,
        ..cfg.stage.distill.clone()
    };
    let run = distill_guidance(&mut student, &base, &data, &distill, 4, RunOptions::default())?;
    for (step, loss) in run.val_curve() {
        println!("distill step {step:4}  val loss {loss:.4}");
    }
    let images = sample_images(&student, &ae, &classes, 2.0, 20, &mut Rng::new(3))?;
    println!(
        "student w=2: class consistency {:.3}",
        classifier.consistency(&images, &labels)?
    );
    Ok(())
}
