//! Tape gradients against central finite differences.
//!
//! Each primitive op is scalarized as `Σ r ⊙ op(x)` with a random fixed `r`;
//! the projection is accumulated in f64 outside the tape so the difference
//! quotient is not swamped by f32 rounding. Difference quotients use one
//! Richardson step, `(4·D(h/2) − D(h)) / 3`. Errors are norm-wise relative:
//! `‖fd − ad‖ / ‖ad‖` over the checked coordinates or directions.

use std::collections::BTreeMap;
use std::sync::Arc;

use dcgen::models::{Binding, Conditioning, DitConfig, Group, ParamStore};
use dcgen::objectives::{
    corrected_velocity_batch, flow_matching_loss, guide_flow_matching_loss, FlowBatch, FlowSample, GuidanceBatch,
    VelocityModel,
};
use dcgen::{DiTModel, LatentSpec, Result, Rng, Tape, Tensor, Var};

pub const INSTANCES: usize = 20;
pub const TOL: f64 = 1e-3;
const H: f64 = 1e-2;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;
pub type Gen = dyn Fn(&mut Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub seed: u64,
    pub gen: Box<Gen>,
    pub build: Box<Build>,
}

fn case(
    name: &'static str,
    seed: u64,
    gen: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        seed,
        gen: Box::new(gen),
        build: Box::new(build),
    }
}

fn forward(build: &Build, inputs: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).clone()
}

fn projected(build: &Build, inputs: &[Tensor], r: &[f32]) -> f64 {
    let y = forward(build, inputs);
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn richardson(f: impl Fn(f64) -> f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(H / 2.0) - d(H)) / 3.0
}

pub fn rel_err(fd: &[f64], ad: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(ad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

fn pick_coords(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= 48 {
        (0..n).collect()
    } else {
        (0..48).map(|_| rng.below(n)).collect()
    }
}

/// Worst error over the inputs of each of `INSTANCES` random draws.
pub fn check_op(case: &OpCase) -> Vec<f64> {
    (0..INSTANCES)
        .map(|inst| {
            let mut rng = Rng::new(case.seed).fork(inst as u64);
            let inputs = (case.gen)(&mut rng);
            let build = &*case.build;
            let out_shape = forward(build, &inputs).shape().to_vec();
            let r = Tensor::randn(&out_shape, 1.0, &mut rng);

            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let y = build(&mut tape, &vars).unwrap();
            let rv = tape.constant(r.clone());
            let prod = tape.mul(y, rv).unwrap();
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();

            let mut worst = 0.0f64;
            for (i, v) in vars.iter().enumerate() {
                let g = grads.get(*v).expect("input gradient");
                let coords = pick_coords(inputs[i].numel(), &mut rng);
                let ad: Vec<f64> = coords.iter().map(|&k| g.data()[k] as f64).collect();
                let fd: Vec<f64> = coords
                    .iter()
                    .map(|&k| {
                        richardson(|h| {
                            let mut moved = inputs.clone();
                            moved[i].data_mut()[k] += h as f32;
                            projected(build, &moved, r.data())
                        })
                    })
                    .collect();
                worst = worst.max(rel_err(&fd, &ad));
            }
            worst
        })
        .collect()
}

fn dims(rng: &mut Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn same_shape_pair(rng: &mut Rng) -> Vec<Tensor> {
    let rank = 1 + rng.below(3);
    let s = dims(rng, rank);
    vec![randn(&s, rng), randn(&s, rng)]
}

fn single(rng: &mut Rng) -> Vec<Tensor> {
    let rank = 1 + rng.below(3);
    let s = dims(rng, rank);
    vec![randn(&s, rng)]
}

/// Rows of at least three entries: with two, a normalized row is ±1 and
/// its gradient vanishes up to the epsilon term.
fn rows(rng: &mut Rng) -> Vec<Tensor> {
    let s = vec![1 + rng.below(4), 3 + rng.below(6)];
    vec![randn(&s, rng)]
}

fn batched_matmul(rng: &mut Rng, trans_b: bool) -> Vec<Tensor> {
    let (b, m, k, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
    let rhs = if trans_b { [n, k] } else { [k, n] };
    let a = randn(&[b, m, k], rng);
    if rng.bernoulli(0.5) {
        vec![a, randn(&rhs, rng)]
    } else {
        vec![a, randn(&[b, rhs[0], rhs[1]], rng)]
    }
}

/// Every primitive op of the tape.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", 1, same_shape_pair, |t, v| t.add(v[0], v[1])),
        case("sub", 2, same_shape_pair, |t, v| t.sub(v[0], v[1])),
        case("mul", 3, same_shape_pair, |t, v| t.mul(v[0], v[1])),
        case("mse", 4, same_shape_pair, |t, v| t.mse(v[0], v[1])),
        case(
            "add_bias",
            5,
            |rng| {
                let rank = 1 + rng.below(2);
                let mut s = dims(rng, rank);
                let d = 1 + rng.below(5);
                s.push(d);
                vec![randn(&s, rng), randn(&[d], rng)]
            },
            |t, v| t.add_bias(v[0], v[1]),
        ),
        case("scale", 6, single, |t, v| Ok(t.scale(v[0], -1.7))),
        case("offset", 7, single, |t, v| Ok(t.offset(v[0], 0.3))),
        case("gather", 8, single, |t, v| {
            let n = t.value(v[0]).numel();
            // Repeated indices exercise the scatter-add path.
            let index: Arc<[usize]> = (0..2 * n + 1).map(|i| (i * 7 + 3) % n).collect();
            let len = index.len();
            t.gather(v[0], index, &[len])
        }),
        case("reshape", 9, single, |t, v| {
            let n = t.value(v[0]).numel();
            t.reshape(v[0], &[1, n])
        }),
        case(
            "permute",
            10,
            |rng| {
                let s = dims(rng, 3);
                vec![randn(&s, rng)]
            },
            |t, v| t.permute(v[0], &[2, 0, 1]),
        ),
        case(
            "matmul",
            11,
            |rng| batched_matmul(rng, false),
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_t",
            12,
            |rng| batched_matmul(rng, true),
            |t, v| t.matmul_t(v[0], v[1]),
        ),
        case("sum", 13, single, |t, v| Ok(t.sum(v[0]))),
        case("mean", 14, single, |t, v| Ok(t.mean(v[0]))),
        case("mean_square", 15, single, |t, v| Ok(t.mean_square(v[0]))),
        case("layer_norm", 16, rows, |t, v| t.layer_norm(v[0])),
        case("softmax", 17, rows, |t, v| t.softmax(v[0])),
        case("gelu", 18, single, |t, v| Ok(t.gelu(v[0]))),
        case("silu", 19, single, |t, v| Ok(t.silu(v[0]))),
        case(
            "avg_pool",
            20,
            |rng| {
                let r = 1 + rng.below(2);
                let s = [
                    1 + rng.below(2),
                    r * (1 + rng.below(2)),
                    r * (1 + rng.below(2)),
                    1 + rng.below(3),
                ];
                vec![randn(&s, rng)]
            },
            // Window 2 whenever both spatial extents are even, else 1.
            |t, v| {
                let s = t.shape(v[0]);
                let r = if s[1] % 2 == 0 && s[2] % 2 == 0 { 2 } else { 1 };
                t.avg_pool(v[0], r)
            },
        ),
    ]
}

// ---- composite losses ----------------------------------------------------

fn tiny_dit(guidance: bool, rng: &mut Rng) -> DiTModel {
    let cfg = DitConfig {
        spec: LatentSpec::new(4, 2, 2).unwrap(),
        image_size: (16, 16),
        hidden: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        freq_dim: 8,
        guidance_embed: guidance,
    };
    let mut model = DiTModel::new(cfg, rng).unwrap();
    // Zero-initialized modulation and head would leave most gradients at zero.
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let t = model.params_mut().get_mut(&name).unwrap();
        let noise = Tensor::randn(t.shape(), 0.2, rng);
        *t = t.add(&noise).unwrap();
    }
    model
}

fn flow_batch(shape: &[usize], b: usize, rng: &mut Rng) -> FlowBatch {
    let samples: Vec<FlowSample> = (0..b)
        .map(|_| {
            let x1 = Tensor::randn(shape, 1.0, rng);
            let x0 = Tensor::randn(shape, 1.0, rng);
            FlowSample::at(&x1, &x0, rng.uniform()).unwrap()
        })
        .collect();
    FlowBatch::from_samples(&samples).unwrap()
}

fn mse64(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n
}

fn corrected_mse<M: VelocityModel>(m: &M, batch: &GuidanceBatch) -> f64 {
    let nulls = vec![None; batch.class.len()];
    let cond = Conditioning {
        t: &batch.flow.t,
        class: &batch.class,
        w: Some(&batch.w),
    };
    let v_c = m.predict(&batch.flow.x_t, &cond).unwrap();
    let v_u = m
        .predict(&batch.flow.x_t, &Conditioning { class: &nulls, ..cond })
        .unwrap();
    mse64(
        &corrected_velocity_batch(&v_c, &v_u, &batch.w).unwrap(),
        &batch.flow.v_t,
    )
}

#[derive(Clone, Copy, Debug)]
pub enum Composite {
    FlowMatching,
    GuideFlowMatching,
}

/// Directional derivatives of a DiT loss along 4 random parameter-space
/// directions per instance: tape gradient vs difference quotient of an f64
/// loss computed from gradient-free predictions.
pub fn check_composite(which: Composite) -> Vec<f64> {
    let guidance = matches!(which, Composite::GuideFlowMatching);
    (0..INSTANCES)
        .map(|inst| {
            let mut rng = Rng::new(30 + guidance as u64).fork(inst as u64);
            let model = tiny_dit(guidance, &mut rng);
            let shape = model.config().latent_shape().unwrap();
            let b = 3;
            let flow = flow_batch(&shape, b, &mut rng);
            let class = (0..b).map(|i| (i > 0).then(|| rng.below(3))).collect::<Vec<_>>();
            let w = (0..b).map(|_| rng.uniform_in(1.0, 5.0)).collect();
            let batch = GuidanceBatch::new(flow, class, w).unwrap();

            let oracle = |m: &DiTModel| match which {
                Composite::FlowMatching => {
                    let cond = Conditioning {
                        t: &batch.flow.t,
                        class: &batch.class,
                        w: None,
                    };
                    mse64(&m.predict(&batch.flow.x_t, &cond).unwrap(), &batch.flow.v_t)
                }
                Composite::GuideFlowMatching => corrected_mse(m, &batch),
            };

            let mut tape = Tape::new();
            let bind = model.params().bind(&mut tape);
            let loss = match which {
                Composite::FlowMatching => {
                    flow_matching_loss(&model, &mut tape, &bind, &batch.flow, &batch.class, None)
                }
                Composite::GuideFlowMatching => guide_flow_matching_loss(&model, &mut tape, &bind, &batch),
            }
            .unwrap();
            let grads = tape.backward(loss).unwrap();

            let mut ad = Vec::new();
            let mut fd = Vec::new();
            for d in 0..4 {
                let mut drng = rng.fork(100 + d);
                let dir: BTreeMap<String, Tensor> = model
                    .params()
                    .iter()
                    .map(|(n, p)| (n.to_string(), Tensor::randn(p.tensor.shape(), 1.0, &mut drng)))
                    .collect();
                let dot: f64 = dir
                    .iter()
                    .map(|(n, u)| {
                        grads.get(bind.get(n).unwrap()).map_or(0.0, |g| {
                            g.data().iter().zip(u.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
                        })
                    })
                    .sum();
                ad.push(dot);
                fd.push(richardson(|s| {
                    let mut moved = model.clone();
                    for (n, u) in &dir {
                        let t = moved.params_mut().get_mut(n).unwrap();
                        *t = t.add(&u.scale(s as f32)).unwrap();
                    }
                    oracle(&moved)
                }));
            }
            rel_err(&fd, &ad)
        })
        .collect()
}

/// `v(x, c) = a·x + b·[c ≠ ∅]`, independent of `t` and `w`.
pub struct GateModel {
    params: ParamStore,
}

impl GateModel {
    pub fn new(a: f32, b: f32) -> Self {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::from_vec(vec![a]), Group::Trunk);
        params.insert("b", Tensor::from_vec(vec![b]), Group::Trunk);
        Self { params }
    }
}

impl VelocityModel for GateModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn velocity(&self, tape: &mut Tape, bind: &Binding, x: Var, cond: &Conditioning<'_>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let per = n / shape[0];
        let zeros: Arc<[usize]> = vec![0; n].into();
        let a = tape.gather(bind.get("a")?, zeros.clone(), &shape)?;
        let b = tape.gather(bind.get("b")?, zeros, &shape)?;
        let mask: Vec<f32> = cond
            .class
            .iter()
            .flat_map(|c| std::iter::repeat_n(if c.is_some() { 1.0 } else { 0.0 }, per))
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        let ax = tape.mul(a, x)?;
        let bm = tape.mul(b, mask)?;
        tape.add(ax, bm)
    }
}

/// Guided flow-matching loss on [`GateModel`]: per instance, the tape
/// gradient against (closed form error, difference quotient error).
pub fn check_gate_model() -> Vec<(f64, f64)> {
    (0..INSTANCES)
        .map(|inst| {
            let mut rng = Rng::new(40).fork(inst as u64);
            let (a, b) = (rng.normal(), rng.normal());
            let bsz = 4;
            let flow = flow_batch(&[2, 3], bsz, &mut rng);
            let class: Vec<Option<usize>> = (0..bsz).map(|i| (i % 3 != 0).then_some(0)).collect();
            let w: Vec<f32> = (0..bsz).map(|_| rng.uniform_in(1.0, 5.0)).collect();
            let batch = GuidanceBatch::new(flow, class, w).unwrap();

            let model = GateModel::new(a, b);
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let loss = guide_flow_matching_loss(&model, &mut tape, &bind, &batch).unwrap();
            let grads = tape.backward(loss).unwrap();
            let ad = [
                grads.get(bind.get("a").unwrap()).unwrap().item().unwrap() as f64,
                grads.get(bind.get("b").unwrap()).unwrap().item().unwrap() as f64,
            ];

            // The corrected velocity of this model is a·x + b·[c ≠ ∅]/(1 + w).
            let per = 6;
            let (mut ga, mut gb) = (0.0, 0.0);
            for (k, (&x, &v)) in batch.flow.x_t.data().iter().zip(batch.flow.v_t.data()).enumerate() {
                let i = k / per;
                let m = if batch.class[i].is_some() { 1.0 } else { 0.0 };
                let cb = m / (1.0 + batch.w[i] as f64);
                let res = a as f64 * x as f64 + b as f64 * cb - v as f64;
                ga += 2.0 * res * x as f64;
                gb += 2.0 * res * cb;
            }
            let n = batch.flow.v_t.numel() as f64;
            let closed = [ga / n, gb / n];

            let fd = [
                richardson(|h| corrected_mse(&GateModel::new((a as f64 + h) as f32, b), &batch)),
                richardson(|h| corrected_mse(&GateModel::new(a, (b as f64 + h) as f32), &batch)),
            ];
            (rel_err(&closed, &ad), rel_err(&fd, &ad))
        })
        .collect()
}
