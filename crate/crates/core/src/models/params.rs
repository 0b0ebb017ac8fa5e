use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::optim::{AdamW, Ema};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Which part of a model a parameter belongs to. Stages freeze by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Latent-bound input map and its positional encodings.
    Embedder,
    /// Latent-bound output map.
    Head,
    /// Transformer blocks and final modulation.
    Trunk,
    /// Timestep and class embeddings.
    Conditioning,
    /// Guidance-scale embedding of a distilled model.
    Guidance,
    Lora,
    Encoder,
    Decoder,
    /// Fixed statistics, never trained.
    Buffer,
}

impl Group {
    /// Groups that are part of the pretrained diffusion weights (everything
    /// that does not bind to a latent space).
    pub fn is_backbone(self) -> bool {
        matches!(self, Group::Trunk | Group::Conditioning | Group::Guidance)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
    pub frozen: bool,
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Parameter counts after a freeze/attach decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                group,
                frozen: group == Group::Buffer,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| contract!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| contract!("unknown parameter `{name}`"))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets every freeze flag from a predicate; buffers stay frozen.
    pub fn set_trainable(&mut self, mut trainable: impl FnMut(&str, Group) -> bool) {
        for (name, p) in &mut self.params {
            p.frozen = p.group == Group::Buffer || !trainable(name, p.group);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_, _| false);
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, total: 0 };
        for p in self.params.values().filter(|p| p.group != Group::Buffer) {
            c.total += p.tensor.numel();
            if !p.frozen {
                c.trainable += p.tensor.numel();
            }
        }
        c
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter on `tape`; only unfrozen ones require grad.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.tensor.clone(), !p.frozen)))
            .collect();
        Binding { vars }
    }

    /// Records every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.tensor.clone())))
            .collect();
        Binding { vars }
    }

    /// Applies one optimizer step to the unfrozen parameters.
    pub fn apply_grads(&mut self, opt: &mut AdamW, bind: &Binding, grads: &mut Gradients) -> Result<()> {
        let mut owned = Vec::new();
        for (name, p) in &self.params {
            if p.frozen {
                continue;
            }
            let var = bind.get(name)?;
            let g = grads
                .take(var)
                .ok_or_else(|| contract!("no gradient recorded for `{name}`"))?;
            owned.push((name.clone(), g));
        }
        let mut by_name: HashMap<String, Tensor> = owned.into_iter().collect();
        let mut updates = Vec::with_capacity(by_name.len());
        for (name, p) in self.params.iter_mut().filter(|(_, p)| !p.frozen) {
            let g = by_name.remove(name).expect("collected above");
            updates.push((name.as_str(), &mut p.tensor, g));
        }
        opt.step(updates.iter_mut().map(|(n, p, g)| (*n, &mut **p, &*g)))
    }

    pub fn update_ema(&self, ema: &mut Ema) -> Result<()> {
        ema.update(
            self.params
                .iter()
                .filter(|(_, p)| !p.frozen)
                .map(|(n, p)| (n.as_str(), &p.tensor)),
        )
    }

    /// Copies of the parameters matching `keep`.
    pub fn snapshot(&self, mut keep: impl FnMut(&str, &Param) -> bool) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(n, p)| keep(n, p))
            .map(|(n, p)| (n.clone(), p.tensor.clone()))
            .collect()
    }

    /// True when every parameter in `reference` is present here and bitwise equal.
    pub fn matches_bitwise(&self, reference: &BTreeMap<String, Tensor>) -> bool {
        reference
            .iter()
            .all(|(n, t)| self.params.get(n).is_some_and(|p| p.tensor.bit_eq(t)))
    }
}

/// Captures frozen parameters at stage start and verifies they never move.
#[derive(Debug)]
pub struct FreezeGuard {
    frozen: BTreeMap<String, Tensor>,
    checks: usize,
}

impl FreezeGuard {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            frozen: store.snapshot(|_, p| p.frozen),
            checks: 0,
        }
    }

    pub fn check(&mut self, store: &ParamStore) -> Result<()> {
        self.checks += 1;
        for (name, t) in &self.frozen {
            let cur = store.get(name)?;
            if !cur.bit_eq(t) {
                return Err(Error::Internal(format!("frozen parameter `{name}` changed")));
            }
        }
        Ok(())
    }

    pub fn checks(&self) -> usize {
        self.checks
    }

    pub fn guarded(&self) -> usize {
        self.frozen.len()
    }
}

/// Glorot-uniform `[out, in]` matrix.
pub fn xavier(out: usize, inp: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (inp + out) as f32).sqrt();
    Tensor::uniform(&[out, inp], bound, rng)
}
