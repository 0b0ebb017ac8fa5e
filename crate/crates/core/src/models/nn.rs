//! Layer helpers shared by the autoencoder and the transformer.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::lora::LoraAdapter;
use super::params::Binding;
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// `x · Wᵀ + b` for parameters `{prefix}.weight` / `{prefix}.bias`, plus the
/// low-rank path `(α/r)·(x·Aᵀ)·Bᵀ` when an adapter targets the weight.
pub(crate) fn linear(
    tape: &mut Tape,
    bind: &Binding,
    adapters: &BTreeMap<String, LoraAdapter>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let wname = format!("{prefix}.weight");
    let w = bind.get(&wname)?;
    let mut y = tape.matmul_t(x, w)?;
    if let Some(adapter) = adapters.get(&wname) {
        let a = bind.get(&adapter.a_name())?;
        let b = bind.get(&adapter.b_name())?;
        let xa = tape.matmul_t(x, a)?;
        let xab = tape.matmul_t(xa, b)?;
        let delta = tape.scale(xab, adapter.scaling());
        y = tape.add(y, delta)?;
    }
    if let Some(bias) = bind.try_get(&format!("{prefix}.bias")) {
        y = tape.add_bias(y, bias)?;
    }
    Ok(y)
}

/// Plain linear layer with no adapters.
pub(crate) fn dense(tape: &mut Tape, bind: &Binding, x: Var, prefix: &str) -> Result<Var> {
    linear(tape, bind, &BTreeMap::new(), x, prefix)
}

/// Index selecting chunk `k` of width `d` from `[B, n·d]` rows and repeating it
/// for each of `t` tokens, producing `[B·t, d]`.
pub(crate) fn chunk_broadcast_index(b: usize, t: usize, d: usize, n: usize, k: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for _ in 0..t {
            idx.extend((0..d).map(|j| bi * n * d + k * d + j));
        }
    }
    idx.into()
}

/// Index tiling a `[t, d]` table `b` times into `[b·t, d]`.
pub(crate) fn tile_index(b: usize, t: usize, d: usize) -> Arc<[usize]> {
    let per: Vec<usize> = (0..t * d).collect();
    let mut idx = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        idx.extend_from_slice(&per);
    }
    idx.into()
}

/// Index gathering rows `ids` from a `[rows, d]` table.
pub(crate) fn row_index(ids: &[usize], d: usize) -> Arc<[usize]> {
    ids.iter()
        .flat_map(|&r| (0..d).map(move |j| r * d + j))
        .collect::<Vec<_>>()
        .into()
}

/// Sinusoidal features `[cos(v·s·ω_i), sin(v·s·ω_i)]` with geometric
/// frequencies `ω_i = 10000^(-i/half)`.
pub fn sinusoidal(values: &[f32], dim: usize, scale: f32) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let arg0 = (v * scale) as f64;
        let mut row = vec![0.0f32; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = arg0 * freq;
            row[i] = a.cos() as f32;
            row[half + i] = a.sin() as f32;
        }
        data.extend(row);
    }
    Tensor::new(vec![values.len(), dim], data).expect("sinusoidal shape")
}
