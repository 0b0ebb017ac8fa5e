//! Per-layer distance between the pretrained pathway (old embedder, old
//! latents) and the adapted pathway (new embedder, new latents) through the
//! shared trunk.

use serde::Serialize;

use crate::error::{contract, Error, Result};
use crate::models::{Conditioning, DiTModel, Group, LatentSpec};
use crate::objectives::{spatial_downsample, FlowSample};
use crate::pipeline::GapMetric;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Paired probe inputs: the same images encoded by each model's autoencoder.
#[derive(Clone, Debug)]
pub struct GapProbe {
    /// `[B, c, h, w]` latents for the pretrained model.
    pub base_latents: Tensor,
    /// `[B, c', h', w']` latents for the adapted model.
    pub adapted_latents: Tensor,
    pub class: Vec<Option<usize>>,
    /// Timestep fed to both paths; below 1 the latents are noised with
    /// independent noise drawn from `seed`.
    pub t: f32,
    /// Guidance scale for distilled models.
    pub w: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    /// One distance per transformer block, first block first.
    pub layers: Vec<f64>,
    pub metric: GapMetric,
    pub batch: usize,
    pub t: f32,
    pub base_spec: LatentSpec,
    pub adapted_spec: LatentSpec,
}

impl GapReport {
    /// Gap after the first block.
    pub fn first(&self) -> f64 {
        self.layers[0]
    }
}

fn shared_weights(base: &DiTModel, adapted: &DiTModel) -> Result<()> {
    let keep = |_: &str, p: &crate::models::Param| !matches!(p.group, Group::Embedder | Group::Head);
    let a = base.params().snapshot(keep);
    let b = adapted.params().snapshot(keep);
    let same = a.len() == b.len() && a.iter().all(|(n, t)| b.get(n).is_some_and(|u| u.bit_eq(t)));
    if !same || base.config().depth != adapted.config().depth || base.config().hidden != adapted.config().hidden {
        return Err(contract!(
            "gap probe needs both models to share trunk and conditioning weights"
        ));
    }
    Ok(())
}

/// `[B, T, D]` features back onto their `[B, gh, gw, D]` token grid.
fn to_grid(f: Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let s = f.shape().to_vec();
    f.reshape(&[s[0], grid.0, grid.1, s[2]])
}

fn distance(a: &Tensor, b: &Tensor, metric: GapMetric) -> Result<f64> {
    match metric {
        GapMetric::Mse => a.mse(b),
        GapMetric::Cosine => {
            a.check_same_shape(b)?;
            let d = *a.shape().last().expect("rank >= 1");
            let rows = a.numel() / d;
            let mut acc = 0.0f64;
            for (x, y) in a.data().chunks(d).zip(b.data().chunks(d)) {
                let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
                for (&u, &v) in x.iter().zip(y) {
                    xy += u as f64 * v as f64;
                    xx += u as f64 * u as f64;
                    yy += v as f64 * v as f64;
                }
                let denom = (xx * yy).sqrt();
                acc += if denom > 0.0 { 1.0 - xy / denom } else { 0.0 };
            }
            Ok(acc / rows as f64)
        }
    }
}

/// Runs both pathways and reports the distance after every block. When the
/// token grids differ, the finer grid is average-pooled onto the coarser one.
pub fn layer_gap_probe(base: &DiTModel, adapted: &DiTModel, probe: &GapProbe, metric: GapMetric) -> Result<GapReport> {
    shared_weights(base, adapted)?;
    let b = probe.class.len();
    if probe.base_latents.shape().first() != Some(&b) || probe.adapted_latents.shape().first() != Some(&b) {
        return Err(contract!("probe latents and classes disagree on batch size"));
    }
    if !(0.0..=1.0).contains(&probe.t) {
        return Err(contract!("probe timestep {} outside [0, 1]", probe.t));
    }
    let grid_a = base.config().token_grid()?;
    let grid_b = adapted.config().token_grid()?;
    let (r, pool_base) = if grid_a.0 >= grid_b.0 {
        (grid_a.0 / grid_b.0, true)
    } else {
        (grid_b.0 / grid_a.0, false)
    };
    let (fine, coarse) = if pool_base { (grid_a, grid_b) } else { (grid_b, grid_a) };
    if coarse.0 * r != fine.0 || coarse.1 * r != fine.1 {
        return Err(Error::SpecMismatch(format!(
            "token grids {grid_a:?} and {grid_b:?} are not related by an integer ratio"
        )));
    }

    let root = Rng::new(probe.seed);
    let noised = |x: &Tensor, stream: u64| -> Result<Tensor> {
        if probe.t >= 1.0 {
            return Ok(x.clone());
        }
        let n = Tensor::randn(x.shape(), 1.0, &mut root.fork(stream));
        Ok(FlowSample::at(x, &n, probe.t)?.x_t)
    };
    let ts = vec![probe.t; b];
    let ws = vec![probe.w; b];
    let cond_for = |m: &DiTModel| Conditioning {
        t: &ts,
        class: &probe.class,
        w: m.is_guidance_distilled().then_some(ws.as_slice()),
    };
    let fa = base.capture_layer_features(&noised(&probe.base_latents, 1)?, &cond_for(base))?;
    let fb = adapted.capture_layer_features(&noised(&probe.adapted_latents, 2)?, &cond_for(adapted))?;

    let layers = fa
        .into_iter()
        .zip(fb)
        .map(|(a, bb)| {
            let (a, bb) = (to_grid(a, grid_a)?, to_grid(bb, grid_b)?);
            let (a, bb) = match (r, pool_base) {
                (1, _) => (a, bb),
                (_, true) => (spatial_downsample(&a, r)?, bb),
                (_, false) => (a, spatial_downsample(&bb, r)?),
            };
            distance(&a, &bb, metric)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GapReport {
        layers,
        metric,
        batch: b,
        t: probe.t,
        base_spec: base.spec(),
        adapted_spec: adapted.spec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DitConfig;
    use crate::pipeline::adapt_model;

    fn cfg() -> DitConfig {
        DitConfig {
            spec: LatentSpec::new(4, 2, 4).unwrap(),
            image_size: (16, 16),
            hidden: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            freq_dim: 8,
            guidance_embed: false,
        }
    }

    fn probe(base: &LatentSpec, adapted: &LatentSpec, t: f32) -> GapProbe {
        let mut rng = Rng::new(5);
        let sa = base.latent_shape(16, 16).unwrap();
        let sb = adapted.latent_shape(16, 16).unwrap();
        GapProbe {
            base_latents: Tensor::randn(&[3, sa[0], sa[1], sa[2]], 1.0, &mut rng),
            adapted_latents: Tensor::randn(&[3, sb[0], sb[1], sb[2]], 1.0, &mut rng),
            class: vec![Some(0), Some(2), None],
            t,
            w: 0.0,
            seed: 1,
        }
    }

    fn perturbed(m: &DiTModel) -> DiTModel {
        let mut m = m.clone();
        // Untrained heads and modulations are zero, which makes blocks identity
        // maps; give them some weight so layers differ.
        let mut rng = Rng::new(9);
        let names: Vec<String> = m.params().names().map(str::to_string).collect();
        for n in names {
            let t = m.params_mut().get_mut(&n).unwrap();
            let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
            *t = t.add(&noise).unwrap();
        }
        m
    }

    #[test]
    fn self_gap_is_zero() {
        let m = perturbed(&DiTModel::new(cfg(), &mut Rng::new(0)).unwrap());
        let mut p = probe(&m.spec(), &m.spec(), 0.5);
        p.adapted_latents = p.base_latents.clone();
        // Same latents and same noise stream on both sides needs t = 1.
        p.t = 1.0;
        for metric in [GapMetric::Mse, GapMetric::Cosine] {
            let r = layer_gap_probe(&m, &m, &p, metric).unwrap();
            assert_eq!(r.layers.len(), 2);
            assert!(r.layers.iter().all(|&g| g == 0.0), "{r:?}");
        }
    }

    #[test]
    fn random_embedder_has_positive_gap() {
        let m = perturbed(&DiTModel::new(cfg(), &mut Rng::new(0)).unwrap());
        let high = LatentSpec::new(8, 2, 16).unwrap();
        let a = adapt_model(&m, high, 3).unwrap();
        let r = layer_gap_probe(&m, &a, &probe(&m.spec(), &high, 1.0), GapMetric::Mse).unwrap();
        assert!(r.layers.iter().all(|&g| g > 0.0), "{r:?}");
        // Pooling works in either direction.
        let r2 = layer_gap_probe(&a, &m, &probe(&high, &m.spec(), 0.3), GapMetric::Cosine).unwrap();
        assert!(r2.first() >= 0.0);
    }

    #[test]
    fn different_trunks_rejected() {
        let m = DiTModel::new(cfg(), &mut Rng::new(0)).unwrap();
        let other = perturbed(&m);
        let p = probe(&m.spec(), &m.spec(), 1.0);
        assert!(matches!(
            layer_gap_probe(&m, &other, &p, GapMetric::Mse),
            Err(Error::Contract(_))
        ));
    }
}
