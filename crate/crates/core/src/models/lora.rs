//! Low-rank adapters: `W_eff = W + (α/r)·B·A` with `A: [r, in]`, `B: [out, r]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Group, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Attention and MLP projections of every trunk block.
pub const DEFAULT_TARGETS: [&str; 4] = [
    "blocks.*.attn.qkv",
    "blocks.*.attn.proj",
    "blocks.*.mlp.fc1",
    "blocks.*.mlp.fc2",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// `*` matches any run of characters; a pattern without a `.weight`
/// suffix also matches the weight under that prefix.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    glob(pattern.as_bytes(), name.as_bytes()) || glob(format!("{pattern}.weight").as_bytes(), name.as_bytes())
}

fn glob(p: &[u8], s: &[u8]) -> bool {
    match (p.first(), s.first()) {
        (None, None) => true,
        (Some(b'*'), _) => glob(&p[1..], s) || (!s.is_empty() && glob(p, &s[1..])),
        (Some(a), Some(b)) if a == b => glob(&p[1..], &s[1..]),
        _ => false,
    }
}

/// Installs adapters on every 2-D parameter matched by `targets`.
///
/// Matched base weights are frozen; `B` starts at zero so outputs are
/// unchanged until a training step.
pub(crate) fn attach(
    params: &mut ParamStore,
    adapters: &mut BTreeMap<String, LoraAdapter>,
    targets: &[String],
    rank: usize,
    alpha: f32,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let mut chosen = Vec::new();
    for pat in targets {
        let hits: Vec<String> = params
            .iter()
            .filter(|(n, p)| p.tensor.rank() == 2 && p.group != Group::Lora && pattern_matches(pat, n))
            .map(|(n, _)| n.to_string())
            .collect();
        if hits.is_empty() {
            return Err(Error::Config(format!(
                "LoRA target pattern `{pat}` matches no two-dimensional parameter"
            )));
        }
        chosen.extend(hits);
    }
    chosen.sort();
    chosen.dedup();
    for target in &chosen {
        if adapters.contains_key(target) {
            return Err(Error::State(format!("`{target}` already carries an adapter")));
        }
        let shape = params.get(target)?.shape().to_vec();
        let (out, inp) = (shape[0], shape[1]);
        let adapter = LoraAdapter {
            target: target.clone(),
            rank,
            alpha,
        };
        let bound = 1.0 / (inp as f32).sqrt();
        let a = Tensor::uniform(&[rank, inp], bound, &mut rng.fork(adapter_stream(target)));
        params.insert(adapter.a_name(), a, Group::Lora);
        params.insert(adapter.b_name(), Tensor::zeros(&[out, rank]), Group::Lora);
        adapters.insert(target.clone(), adapter);
    }
    Ok(chosen)
}

fn adapter_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Folds every adapter into its base weight and removes it.
pub(crate) fn merge(params: &mut ParamStore, adapters: &mut BTreeMap<String, LoraAdapter>) -> Result<()> {
    if adapters.is_empty() {
        return Err(Error::State("no LoRA adapters attached".into()));
    }
    for (target, adapter) in std::mem::take(adapters) {
        let a = params
            .remove(&adapter.a_name())
            .ok_or_else(|| Error::State(format!("adapter A missing for `{target}`")))?
            .tensor;
        let b = params
            .remove(&adapter.b_name())
            .ok_or_else(|| Error::State(format!("adapter B missing for `{target}`")))?
            .tensor;
        let w = params.get_mut(&target)?;
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let r = adapter.rank;
        let s = adapter.scaling() as f64;
        let (ad, bd) = (a.data(), b.data());
        for (i, row) in w.data_mut().chunks_exact_mut(inp).enumerate().take(out) {
            for (j, wv) in row.iter_mut().enumerate() {
                let delta: f64 = (0..r).map(|k| bd[i * r + k] as f64 * ad[k * inp + j] as f64).sum();
                if delta != 0.0 {
                    *wv = (*wv as f64 + s * delta) as f32;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_patterns() {
        assert!(pattern_matches("blocks.*.attn.qkv", "blocks.3.attn.qkv.weight"));
        assert!(pattern_matches("blocks.*", "blocks.0.mlp.fc1.weight"));
        assert!(!pattern_matches("blocks.*.attn.qkv", "blocks.3.attn.proj.weight"));
        assert!(!pattern_matches("head", "head.proj.weight"));
    }
}
