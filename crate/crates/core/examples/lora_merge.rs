//! Attach LoRA adapters to a model, perturb them, and fold them back into
//! the base weights.

use dcgen::models::{Conditioning, Group, DEFAULT_TARGETS};
use dcgen::pipeline::PipelineConfig;
use dcgen::{DiTModel, Rng, Tensor};

fn main() -> dcgen::Result<()> {
    let cfg = PipelineConfig::default();
    let mut model = DiTModel::new(cfg.dit_config(cfg.latent.high)?, &mut Rng::new(0))?;
    let before = model.params().count();
    let targets: Vec<String> = DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect();
    let after = model.attach_lora(&targets, 8, 8.0, &mut Rng::new(1))?;
    println!(
        "{} adapters; trainable {} of {} parameters ({:.1}%), was {}",
        model.adapters().len(),
        after.trainable,
        after.total,
        100.0 * after.fraction(),
        before.total
    );

    // A fresh model has zero adaLN modulation and a zero output head, and a
    // fresh adapter has B = 0; give all of them random values as training would.
    let mut rng = Rng::new(2);
    let names = |model: &DiTModel, keep: &dyn Fn(&str, Group) -> bool| -> Vec<String> {
        model
            .params()
            .iter()
            .filter(|(n, p)| keep(n, p.group))
            .map(|(n, _)| n.to_string())
            .collect()
    };
    let lora = names(&model, &|n, g| g == Group::Lora && n.ends_with(".lora_b"));
    let zeros = names(&model, &|n, _| n.contains("adaln") || n.starts_with("head."));
    for name in lora.iter().chain(&zeros) {
        let t = model.params_mut().get_mut(name)?;
        *t = Tensor::randn(t.shape(), 0.05, &mut rng);
    }

    let [c, h, w] = model.config().latent_shape()?;
    let x = Tensor::randn(&[2, c, h, w], 1.0, &mut rng);
    let cond = Conditioning {
        t: &[0.3, 0.7],
        class: &[Some(1), None],
        w: None,
    };
    let adapted = model.predict(&x, &cond)?;
    let mut plain = model.clone();
    for name in &lora {
        let t = plain.params_mut().get_mut(name)?;
        *t = Tensor::zeros(t.shape());
    }
    println!(
        "{} adapters perturbed; output mse vs zero adapters {:.2e}",
        lora.len(),
        plain.predict(&x, &cond)?.mse(&adapted)?
    );
    model.merge_lora()?;
    let merged = model.predict(&x, &cond)?;
    println!(
        "after merge: {} adapters, {} parameters, output mse vs adapted {:.2e}",
        model.adapters().len(),
        model.params().count().total,
        merged.mse(&adapted)?
    );
    Ok(())
}
