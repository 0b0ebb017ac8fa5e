use std::collections::HashMap;
use std::sync::Arc;

use super::{kernels, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Gather(Var, Arc<[usize]>),
    Reshape(Var),
    MatMul(Var, Var, MatMulDims),
    Sum(Var),
    Mean(Var),
    MeanSquare(Var),
    LayerNorm(Var, Vec<f32>),
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    AvgPool {
        x: Var,
        lead: usize,
        h: usize,
        w: usize,
        d: usize,
        r: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: Option<&'static str>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn binary_shape_check(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract!("{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn nonfinite_op(&self) -> Option<&'static str> {
        self.nonfinite
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        binary_shape_check(ta, tb, name)?;
        let out = ta.zip_map(tb, f)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(name, out, op, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().ok_or_else(|| contract!("add_bias on a scalar"))?;
        if tb.numel() != d {
            return Err(contract!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let grad = self.g(x) || self.g(bias);
        Ok(self.push("add_bias", out, Op::AddBias(x, bias), grad))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).scale(s);
        let grad = self.g(x);
        self.push("scale", out, Op::Scale(x, s), grad)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        let grad = self.g(x);
        self.push("offset", out, Op::Offset(x), grad)
    }

    /// `out[i] = src[index[i]]`, laid out as `shape`. Covers permutes,
    /// broadcasts, row lookups and patch folding.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let n = ts.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(contract!("gather index {bad} out of range for {n} elements"));
        }
        let data: Vec<f32> = index.iter().map(|&i| ts.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let grad = self.g(src);
        Ok(self.push("gather", out, Op::Gather(src, index), grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let grad = self.g(x);
        Ok(self.push("reshape", out, Op::Reshape(x), grad))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) = permute_index(&shape, perm)?;
        self.gather(x, index.into(), &out_shape)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared by every batch entry of `a`) or has the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes; broadcasting as in [`Tape::matmul`].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(contract!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(contract!(
                "matmul inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let batch: usize = lead_a.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead_a {
            return Err(contract!("matmul batch axes differ: {sa:?} vs {sb:?}"));
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0f32; batch * m * n];
        if shared_b {
            kernels::gemm(batch * m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        } else {
            for g in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ta.data()[g * m * k..(g + 1) * m * k],
                    false,
                    &tb.data()[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    0.0,
                );
            }
        }
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        };
        let out = Tensor::new(out_shape, out)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push("matmul", out, Op::MatMul(a, b, dims), grad))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let grad = self.g(x);
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let grad = self.g(x);
        self.push("mean", Tensor::scalar(m as f32), Op::Mean(x), grad)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let m = self.value(x).mean_square();
        let grad = self.g(x);
        self.push("mean_square", Tensor::scalar(m as f32), Op::MeanSquare(x), grad)
    }

    /// Mean squared difference between two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.mean_square(d))
    }

    /// Layer norm over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| contract!("layer_norm on a scalar"))?;
        let (y, rstd) = kernels::layer_norm(tx.data(), d);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let grad = self.g(x);
        Ok(self.push("layer_norm", out, Op::LayerNorm(x, rstd), grad))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| contract!("softmax on a scalar"))?;
        let out = Tensor::new(tx.shape().to_vec(), kernels::softmax(tx.data(), d))?;
        let grad = self.g(x);
        Ok(self.push("softmax", out, Op::Softmax(x), grad))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let grad = self.g(x);
        self.push("gelu", out, Op::Gelu(x), grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        let grad = self.g(x);
        self.push("silu", out, Op::Silu(x), grad)
    }

    /// Non-overlapping `r×r` average pool over a `[..., H, W, D]` layout.
    pub fn avg_pool(&mut self, x: Var, r: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(contract!("avg_pool needs [..., H, W, D], got {shape:?}"));
        }
        let rank = shape.len();
        let (h, w, d) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(contract!("avg_pool: {h}x{w} not divisible by ratio {r}"));
        }
        let lead: usize = shape[..rank - 3].iter().product();
        let y = kernels::avg_pool(self.value(x).data(), lead, h, w, d, r);
        let mut out_shape = shape[..rank - 3].to_vec();
        out_shape.extend([h / r, w / r, d]);
        let out = Tensor::new(out_shape, y)?;
        let grad = self.g(x);
        Ok(self.push("avg_pool", out, Op::AvgPool { x, lead, h, w, d, r }, grad))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero-filled when
    /// it does not participate in the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(op) = self.nonfinite {
            return Err(Error::Numeric { op });
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }

        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.map.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.map.insert(Var(i), t);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, g);
                    self.accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    if self.g(*a) {
                        let bv = self.value(*b).data();
                        let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.g(*b) {
                        let av = self.value(*a).data();
                        let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.g(*bias) {
                        let d = self.value(*bias).numel();
                        let mut db = vec![0.0f64; d];
                        for row in g.chunks_exact(d) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v as f64;
                            }
                        }
                        self.accumulate(&mut grads, *bias, db.into_iter().map(|v| v as f32).collect());
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let dx = g.iter().map(|v| v * s).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Offset(x) | Op::Reshape(x) => self.accumulate(&mut grads, *x, g),
                Op::Gather(src, index) => {
                    let mut ds = vec![0.0f32; self.value(*src).numel()];
                    for (&j, &v) in index.iter().zip(&g) {
                        ds[j] += v;
                    }
                    self.accumulate(&mut grads, *src, ds);
                }
                Op::MatMul(a, b, dims) => self.matmul_backward(&mut grads, *a, *b, *dims, &g),
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    self.accumulate(&mut grads, *x, vec![g[0] / n as f32; n]);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x).data();
                    let c = 2.0 * g[0] as f64 / xv.len() as f64;
                    let dx = xv.iter().map(|&v| (c * v as f64) as f32).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm(x, rstd) => {
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let dx = kernels::layer_norm_backward(node.value.data(), rstd, &g, d);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let dx = kernels::softmax_backward(node.value.data(), &g, d);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(d, &v)| d * kernels::gelu_grad(v)).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(d, &v)| d * kernels::silu_grad(v)).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool { x, lead, h, w, d, r } => {
                    let dx = kernels::avg_pool_backward(&g, *lead, *h, *w, *d, *r);
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        // Leaves created after the loss cannot participate.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.grad && matches!(node.op, Op::Leaf) {
                out.map.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.g(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn matmul_backward(&self, grads: &mut [Option<Vec<f32>>], a: Var, b: Var, d: MatMulDims, g: &[f32]) {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let MatMulDims {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        } = d;
        if self.g(a) {
            let mut da = vec![0.0f32; batch * m * k];
            if shared_b {
                // dA = dC · op(B)ᵀ
                kernels::gemm(batch * m, n, k, g, false, bv, !trans_b, &mut da, 0.0);
            } else {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut da[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
            }
            self.accumulate(grads, a, da);
        }
        if self.g(b) {
            let nb = if shared_b { 1 } else { batch };
            let mut db = vec![0.0f32; nb * k * n];
            let (rows, groups) = if shared_b { (batch * m, 1) } else { (m, batch) };
            for i in 0..groups {
                let gi = &g[i * rows * n..(i + 1) * rows * n];
                let ai = &av[i * rows * k..(i + 1) * rows * k];
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // B stored [n, k]: dB = dCᵀ · A
                    kernels::gemm(n, rows, k, gi, true, ai, false, dbi, 0.0);
                } else {
                    // dB = Aᵀ · dC
                    kernels::gemm(k, rows, n, ai, true, gi, false, dbi, 0.0);
                }
            }
            self.accumulate(grads, b, db);
        }
    }
}

/// Flat source indices realizing an axis permutation.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(contract!("invalid permutation {perm:?} for rank {rank}"));
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        index.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((index, out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.param(Tensor::from_vec(vec![5.0, 6.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_forward_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![f32::MAX, 1.0]));
        let y = tape.scale(x, 10.0);
        let loss = tape.sum(y);
        match tape.backward(loss) {
            Err(Error::Numeric { op }) => assert_eq!(op, "scale"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn permute_transposes() {
        let (idx, shape) = permute_index(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
        assert!(permute_index(&[2, 3], &[0, 0]).is_err());
    }
}
