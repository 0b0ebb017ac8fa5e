//! Wall-clock cost of one denoising step as a function of token count.

use std::time::Instant;

use serde::Serialize;

use crate::error::{contract, Result};
use crate::models::{token_count, Conditioning, DiTModel, DitConfig, LatentSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchOptions {
    pub batch: usize,
    pub repeats: usize,
    /// Untimed iterations before measurement (at least 2 are always run).
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch: 1,
            repeats: 5,
            warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub resolution: (usize, usize),
    pub spec: LatentSpec,
    pub tokens: usize,
    /// Median seconds per forward pass over the timed repeats.
    pub step_time_s: f64,
    pub samples_per_min: f64,
    pub batch: usize,
    pub repeats: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times single forward passes of `model` on random latents.
pub fn bench_step(model: &DiTModel, opts: BenchOptions) -> Result<BenchRecord> {
    if opts.repeats == 0 || opts.batch == 0 {
        return Err(contract!("bench needs at least one repeat and a positive batch"));
    }
    let cfg = model.config();
    let [c, h, w] = cfg.latent_shape()?;
    let b = opts.batch;
    let mut rng = Rng::new(0);
    let x = Tensor::randn(&[b, c, h, w], 1.0, &mut rng);
    let t = vec![0.5; b];
    let class: Vec<Option<usize>> = (0..b).map(|i| Some(i % cfg.num_classes)).collect();
    let ws = vec![1.0; b];
    let cond = Conditioning {
        t: &t,
        class: &class,
        w: model.is_guidance_distilled().then_some(ws.as_slice()),
    };
    for _ in 0..opts.warmup.max(2) {
        model.predict(&x, &cond)?;
    }
    let mut times = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let start = Instant::now();
        std::hint::black_box(model.predict(&x, &cond)?);
        times.push(start.elapsed().as_secs_f64());
    }
    let step = median(times);
    let (hh, ww) = cfg.image_size;
    Ok(BenchRecord {
        resolution: (hh, ww),
        spec: cfg.spec,
        tokens: token_count(hh, ww, &cfg.spec)?,
        step_time_s: step,
        samples_per_min: if step > 0.0 {
            60.0 * b as f64 / step
        } else {
            f64::INFINITY
        },
        batch: b,
        repeats: opts.repeats,
    })
}

/// Benchmarks a freshly initialized model of the `arch` shape built for
/// `spec` at `size × size` pixels.
pub fn bench_model(
    arch: &DitConfig,
    spec: LatentSpec,
    size: usize,
    opts: BenchOptions,
    seed: u64,
) -> Result<BenchRecord> {
    let cfg = DitConfig {
        spec,
        image_size: (size, size),
        ..arch.clone()
    };
    let model = DiTModel::new(cfg, &mut Rng::new(seed))?;
    bench_step(&model, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> DitConfig {
        DitConfig {
            spec: LatentSpec::new(4, 2, 4).unwrap(),
            image_size: (32, 32),
            hidden: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            freq_dim: 8,
            guidance_embed: false,
        }
    }

    #[test]
    fn token_count_attached() {
        let f8 = LatentSpec::new(8, 2, 16).unwrap();
        let one = BenchOptions {
            repeats: 1,
            ..BenchOptions::default()
        };
        let nine = BenchOptions {
            repeats: 9,
            ..BenchOptions::default()
        };
        let a = bench_model(&arch(), f8, 32, one, 0).unwrap();
        let b = bench_model(&arch(), f8, 32, nine, 0).unwrap();
        assert_eq!(a.tokens, 4);
        assert_eq!(a.tokens, b.tokens);
        assert!(a.step_time_s > 0.0 && a.samples_per_min > 0.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
