//! Euler integration of the learned flow from noise (`t = 0`) to data (`t = 1`).

use crate::error::{contract, Error, Result};
use crate::models::{Conditioning, DiTModel, ToyAutoencoder};
use crate::objectives::cfg_combine;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Velocity used by the sampler: classifier-free guidance over two calls for
/// a base model, a single guidance-conditioned call for a distilled one.
pub fn guided_velocity(model: &DiTModel, x: &Tensor, t: f32, classes: &[Option<usize>], w: f32) -> Result<Tensor> {
    let b = classes.len();
    let ts = vec![t; b];
    if model.is_guidance_distilled() {
        let ws = vec![w; b];
        return model.predict(
            x,
            &Conditioning {
                t: &ts,
                class: classes,
                w: Some(&ws),
            },
        );
    }
    let cond = Conditioning {
        t: &ts,
        class: classes,
        w: None,
    };
    let v_c = model.predict(x, &cond)?;
    if w == 0.0 {
        return Ok(v_c);
    }
    let nulls = vec![None; b];
    let v_u = model.predict(x, &Conditioning { class: &nulls, ..cond })?;
    cfg_combine(&v_c, &v_u, w)
}

/// Final latents `[B, c, h, w]` for one class (or ∅) per batch entry.
pub fn sample_latents(
    model: &DiTModel,
    classes: &[Option<usize>],
    w: f32,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(contract!("sampling needs at least one step"));
    }
    if classes.is_empty() {
        return Err(contract!("sampling needs at least one class entry"));
    }
    if w < 0.0 && !model.is_guidance_distilled() {
        log::warn!("negative guidance scale {w} extrapolates away from the condition");
    }
    let [c, h, wd] = model.config().latent_shape()?;
    let mut x = Tensor::randn(&[classes.len(), c, h, wd], 1.0, rng);
    let dt = 1.0 / steps as f32;
    for k in 0..steps {
        let t = k as f32 * dt;
        let v = guided_velocity(model, &x, t, classes, w)?;
        x = x.zip_map(&v, |a, b| a + dt * b)?;
    }
    Ok(x)
}

/// Decoded images `[B, 3, H, W]`, clamped to `[−1, 1]`.
pub fn sample_images(
    model: &DiTModel,
    ae: &ToyAutoencoder,
    classes: &[Option<usize>],
    w: f32,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if ae.spec() != model.spec() {
        return Err(Error::SpecMismatch(format!(
            "model works in {} but the autoencoder in {}",
            model.spec(),
            ae.spec()
        )));
    }
    let z = sample_latents(model, classes, w, steps, rng)?;
    Ok(ae.decode(&z)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// One image `[3, H, W]` of `class`.
pub fn sample_euler(
    model: &DiTModel,
    ae: &ToyAutoencoder,
    class: Option<usize>,
    w: f32,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_images(model, ae, &[class], w, steps, rng)?.index0(0)
}
