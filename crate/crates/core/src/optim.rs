//! AdamW with linear warmup, and parameter EMA.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    shape: Vec<usize>,
}

/// AdamW state: first/second moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    lr: f32,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            lr: 0.0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the most recent step.
    pub fn current_lr(&self) -> f32 {
        self.lr
    }

    /// Learning rate for 1-based step `t`: linear warmup, then constant.
    pub fn lr_at(&self, t: u64) -> f32 {
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (t as f32 / self.cfg.warmup_steps as f32).min(1.0)
        }
    }

    /// One decoupled-weight-decay Adam update over `(name, param, grad)` triples.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        self.lr = lr;
        let (b1, b2) = self.cfg.betas;
        let bc1 = (1.0 - (b1 as f64).powi(t as i32)) as f32;
        let bc2 = (1.0 - (b2 as f64).powi(t as i32)) as f32;
        let decay = 1.0 - lr * self.cfg.weight_decay;
        let eps = self.cfg.eps;

        for (name, param, grad) in updates {
            param.check_same_shape(grad)?;
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; param.numel()],
                v: vec![0.0; param.numel()],
                shape: param.shape().to_vec(),
            });
            if mo.shape != param.shape() {
                return Err(contract!(
                    "optimizer state for `{name}` has shape {:?}, parameter has {:?}",
                    mo.shape,
                    param.shape()
                ));
            }
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p *= decay;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`m.<name>`, `v.<name>`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, mo) in &self.moments {
            out.push((
                format!("m.{name}"),
                Tensor::new(mo.shape.clone(), mo.m.clone()).expect("moment shape"),
            ));
            out.push((
                format!("v.{name}"),
                Tensor::new(mo.shape.clone(), mo.v.clone()).expect("moment shape"),
            ));
        }
        out
    }

    /// Rebuilds state saved with [`AdamW::state_tensors`].
    pub fn restore(cfg: AdamWConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut opt = Self::new(cfg);
        opt.step = step;
        opt.lr = if step == 0 { 0.0 } else { opt.lr_at(step) };
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("m.") else {
                continue;
            };
            let v = tensors
                .get(&format!("v.{name}"))
                .ok_or_else(|| contract!("optimizer state missing second moment for `{name}`"))?;
            m.check_same_shape(v)?;
            opt.moments.insert(
                name.to_string(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    shape: m.shape().to_vec(),
                },
            );
        }
        Ok(opt)
    }
}

/// Exponential moving average of named parameters.
#[derive(Clone, Debug)]
pub struct Ema {
    decay: f32,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f32) -> Self {
        Self {
            decay,
            shadow: BTreeMap::new(),
        }
    }

    pub fn decay(&self) -> f32 {
        self.decay
    }

    /// `shadow ← decay·shadow + (1−decay)·param`; first sight copies the param.
    pub fn update<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        let d = self.decay;
        for (name, p) in params {
            match self.shadow.get_mut(name) {
                None => {
                    self.shadow.insert(name.to_string(), p.clone());
                }
                Some(s) => {
                    s.check_same_shape(p)?;
                    for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                        *sv = d * *sv + (1.0 - d) * pv;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.shadow.get(name)
    }

    pub fn from_shadow(decay: f32, shadow: BTreeMap<String, Tensor>) -> Self {
        Self { decay, shadow }
    }
}

/// Everything besides the model weights needed to continue a stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub opt: AdamW,
    pub ema: Option<Ema>,
    /// Sum and count of losses since the last metrics record.
    pub window: (f64, usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_one(opt: &mut AdamW, p: &mut Tensor, g: &Tensor) {
        opt.step([("p", p, g)]).unwrap();
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            step_one(&mut opt, &mut p, &g);
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn zero_grad_decay_only() {
        let cfg = AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut p = Tensor::from_vec(vec![1.0, -3.0]);
        step_one(&mut opt, &mut p, &Tensor::zeros(&[2]));
        let factor = 1.0f64 - 1e-7;
        for (got, want) in p.data().iter().zip([1.0f64, -3.0]) {
            assert!((*got as f64 - want * factor).abs() <= 1e-7 * want.abs());
        }
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut p = Tensor::from_vec(vec![1.0]);
        step_one(&mut opt, &mut p, &Tensor::from_vec(vec![1.0]));
        // m_hat = v_hat = 1 so the delta is lr / (1 + eps).
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let opt = AdamW::new(AdamWConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        });
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(100), 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step([("p", &mut p, &Tensor::zeros(&[3]))]).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let p = Tensor::full(&[2], 2.0);
        let mut keep = Ema::new(1.0);
        keep.update([("w", &Tensor::zeros(&[2]))]).unwrap();
        keep.update([("w", &p)]).unwrap();
        assert_eq!(keep.get("w").unwrap().data(), &[0.0, 0.0]);

        let mut copy = Ema::new(0.0);
        copy.update([("w", &Tensor::zeros(&[2]))]).unwrap();
        copy.update([("w", &p)]).unwrap();
        assert_eq!(copy.get("w").unwrap().data(), &[2.0, 2.0]);

        let mut half = Ema::new(0.5);
        half.update([("w", &Tensor::zeros(&[2]))]).unwrap();
        half.update([("w", &p)]).unwrap();
        assert_eq!(half.get("w").unwrap().data(), &[1.0, 1.0]);

        assert!(half.update([("w", &Tensor::zeros(&[3]))]).is_err());
    }
}
