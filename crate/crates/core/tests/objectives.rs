//! Velocity algebra properties and loss fixed points.

use std::sync::Arc;

use dcgen::models::{Binding, Conditioning, Group, ParamStore};
use dcgen::objectives::{
    cfg_combine, corrected_velocity, distill_loss, flow_matching_loss, guide_flow_matching_loss, spatial_downsample,
    teacher_guided_velocity, FlowBatch, FlowSample, GuidanceBatch, VelocityModel,
};
use dcgen::optim::{AdamW, AdamWConfig};
use dcgen::{Result, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// `‖a − b‖ / ‖b‖`.
fn rel_norm(a: &Tensor, b: &Tensor) -> f64 {
    (a.mse(b).unwrap() / b.mean_square().max(1e-30)).sqrt()
}

proptest! {
    #[test]
    fn corrected_inverts_cfg(seed in any::<u64>(), w in -0.9f32..20.0, n in 1usize..64) {
        let a = tensor(&[n], seed);
        let b = tensor(&[n], seed ^ 0x5a5a);
        let guided = cfg_combine(&a, &b, w).unwrap();
        let back = corrected_velocity(&guided, &b, w).unwrap();
        // Relative to the larger input: rounding the guided velocity once is
        // amplified without bound as ‖a‖ → 0.
        let err = (back.mse(&a).unwrap() / a.mean_square().max(b.mean_square())).sqrt();
        prop_assert!(err <= 1e-6, "w={w}: {err}");
    }

    #[test]
    fn cfg_fixed_points(seed in any::<u64>(), w in -5.0f32..20.0) {
        let v = tensor(&[7], seed);
        let u = tensor(&[7], seed.wrapping_add(1));
        prop_assert!(cfg_combine(&v, &u, 0.0).unwrap().bit_eq(&v));
        prop_assert!(rel_norm(&cfg_combine(&v, &v, w).unwrap(), &v) <= 1e-6);
        prop_assert!(rel_norm(&corrected_velocity(&v, &v, w.max(-0.5)).unwrap(), &v) <= 1e-6);
    }

    #[test]
    fn interpolation_derivative_is_target_velocity(seed in any::<u64>(), t in 0.1f32..0.9, h in 0.001f32..0.1) {
        let x1 = tensor(&[3, 4], seed);
        let x0 = tensor(&[3, 4], seed ^ 1);
        let hi = FlowSample::at(&x1, &x0, t + h).unwrap();
        let lo = FlowSample::at(&x1, &x0, t - h).unwrap();
        let v = FlowSample::at(&x1, &x0, t).unwrap().v_t;
        for ((a, b), want) in hi.x_t.data().iter().zip(lo.x_t.data()).zip(v.data()) {
            let d = (*a as f64 - *b as f64) / (2.0 * h as f64);
            // f32 evaluation of the interpolant limits agreement.
            prop_assert!((d - *want as f64).abs() <= 1e-5 / h as f64 * (1.0 + want.abs() as f64));
        }
    }

    #[test]
    fn downsample_preserves_mean(seed in any::<u64>(), r in 1usize..4, g in 1usize..4, d in 1usize..5) {
        let e = tensor(&[g * r, g * r, d], seed);
        let p = spatial_downsample(&e, r).unwrap();
        prop_assert_eq!(p.shape(), &[g, g, d][..]);
        prop_assert!((p.mean() - e.mean()).abs() < 1e-5);
    }

    #[test]
    fn alignment_loss_is_nonnegative_and_batch_permutation_invariant(seed in any::<u64>(), b in 1usize..5) {
        let e = tensor(&[b, 4, 4, 3], seed);
        let phi = tensor(&[b, 2, 2, 3], seed ^ 9);
        let loss = |e: &Tensor, phi: &Tensor| {
            let mut tape = Tape::new();
            let (ev, pv) = (tape.constant(e.clone()), tape.constant(phi.clone()));
            let l = dcgen::objectives::alignment_loss(&mut tape, pv, ev, 2).unwrap();
            tape.value(l).item().unwrap()
        };
        let base = loss(&e, &phi);
        prop_assert!(base >= 0.0);
        let rev = |t: &Tensor| {
            let parts: Vec<Tensor> = (0..b).rev().map(|i| t.index0(i).unwrap()).collect();
            Tensor::stack(&parts).unwrap()
        };
        prop_assert!((loss(&rev(&e), &rev(&phi)) - base).abs() <= 1e-6 * base.max(1.0));
    }
}

/// Returns its own parameter `out` as the velocity, whatever the input.
struct Fixed {
    params: ParamStore,
}

impl Fixed {
    fn new(out: Tensor) -> Self {
        let mut params = ParamStore::new();
        params.insert("out", out, Group::Head);
        Self { params }
    }
}

impl VelocityModel for Fixed {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn velocity(&self, _tape: &mut Tape, bind: &Binding, _x: Var, _cond: &Conditioning<'_>) -> Result<Var> {
        bind.get("out")
    }
}

const CLASSES: usize = 3;

/// `v(x, c, w) = a·x + p[c] + w·q[c]` with per-class scalars; row `CLASSES` is ∅.
struct Affine {
    params: ParamStore,
}

impl Affine {
    fn new(a: f32, p: Vec<f32>, q: Vec<f32>) -> Self {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::from_vec(vec![a]), Group::Trunk);
        params.insert("p", Tensor::from_vec(p), Group::Trunk);
        params.insert("q", Tensor::from_vec(q), Group::Guidance);
        Self { params }
    }

    fn random(rng: &mut Rng) -> Self {
        let v = |rng: &mut Rng| (0..=CLASSES).map(|_| rng.normal()).collect();
        Self::new(rng.normal(), v(rng), v(rng))
    }

    /// A teacher `v_θ(x, c) = a·x + p[c]` (no guidance input).
    fn teacher(rng: &mut Rng) -> Self {
        let p = (0..=CLASSES).map(|_| rng.normal()).collect();
        Self::new(1.0 + rng.normal() * 0.2, p, vec![0.0; CLASSES + 1])
    }

    /// Student whose guided output equals the teacher's CFG combination exactly.
    fn consistent_with(teacher: &Affine) -> Self {
        let a = teacher.params.get("a").unwrap().data()[0];
        let p = teacher.params.get("p").unwrap().data().to_vec();
        let null = p[CLASSES];
        let q = p.iter().map(|&pc| pc - null).collect();
        Self::new(a, p, q)
    }
}

impl VelocityModel for Affine {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn velocity(&self, tape: &mut Tape, bind: &Binding, x: Var, cond: &Conditioning<'_>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let per = n / shape[0];
        let rows: Vec<usize> = cond.class.iter().map(|c| c.unwrap_or(CLASSES)).collect();
        let by_entry: Arc<[usize]> = (0..n).map(|k| rows[k / per]).collect();
        let a = tape.gather(bind.get("a")?, vec![0; n].into(), &shape)?;
        let p = tape.gather(bind.get("p")?, by_entry.clone(), &shape)?;
        let q = tape.gather(bind.get("q")?, by_entry, &shape)?;
        let w: Vec<f32> = match cond.w {
            Some(w) => (0..n).map(|k| w[k / per]).collect(),
            None => vec![0.0; n],
        };
        let w = tape.constant(Tensor::new(shape, w)?);
        let ax = tape.mul(a, x)?;
        let wq = tape.mul(w, q)?;
        let out = tape.add(ax, p)?;
        tape.add(out, wq)
    }
}

fn guidance_batch(b: usize, w: Option<f32>, rng: &mut Rng) -> GuidanceBatch {
    let samples: Vec<FlowSample> = (0..b)
        .map(|_| {
            let x1 = Tensor::randn(&[2, 2, 2], 1.0, rng);
            let x0 = Tensor::randn(&[2, 2, 2], 1.0, rng);
            FlowSample::at(&x1, &x0, rng.uniform()).unwrap()
        })
        .collect();
    let class = (0..b).map(|i| (i % 4 != 3).then(|| rng.below(CLASSES))).collect();
    let w = (0..b).map(|_| w.unwrap_or_else(|| rng.uniform_in(1.0, 5.0))).collect();
    GuidanceBatch::new(FlowBatch::from_samples(&samples).unwrap(), class, w).unwrap()
}

fn eval<M: VelocityModel>(m: &M, f: impl Fn(&M, &mut Tape, &Binding) -> Result<Var>) -> f32 {
    let mut tape = Tape::new();
    let bind = m.params().bind_constant(&mut tape);
    let l = f(m, &mut tape, &bind).unwrap();
    tape.value(l).item().unwrap()
}

fn flow_loss<M: VelocityModel>(m: &M, batch: &FlowBatch, class: &[Option<usize>], w: Option<&[f32]>) -> f32 {
    eval(m, |m, t, b| flow_matching_loss(m, t, b, batch, class, w))
}

#[test]
fn flow_loss_fixed_points() {
    let mut rng = Rng::new(1);
    let gb = guidance_batch(4, None, &mut rng);
    let exact = Fixed::new(gb.flow.v_t.clone());
    assert_eq!(flow_loss(&exact, &gb.flow, &gb.class, None), 0.0);
    let off = Fixed::new(gb.flow.v_t.map(|v| v + 1.0));
    assert!((flow_loss(&off, &gb.flow, &gb.class, None) - 1.0).abs() < 1e-6);
}

#[test]
fn flow_loss_is_invariant_to_batch_duplication() {
    let mut rng = Rng::new(2);
    let gb = guidance_batch(3, None, &mut rng);
    let model = Affine::random(&mut rng);
    let single = flow_loss(&model, &gb.flow, &gb.class, None);

    let twice = |t: &Tensor| {
        let parts: Vec<Tensor> = (0..2 * gb.flow.len())
            .map(|i| t.index0(i % gb.flow.len()).unwrap())
            .collect();
        Tensor::stack(&parts).unwrap()
    };
    let doubled = FlowBatch {
        x_t: twice(&gb.flow.x_t),
        v_t: twice(&gb.flow.v_t),
        t: gb.flow.t.repeat(2),
    };
    let class = gb.class.repeat(2);
    let double = flow_loss(&model, &doubled, &class, None);
    assert!((single - double).abs() <= 1e-6 * single.max(1.0));
}

#[test]
fn guide_loss_of_condition_blind_model_is_flow_loss() {
    let mut rng = Rng::new(3);
    let gb = guidance_batch(4, None, &mut rng);
    let out = Tensor::randn(gb.flow.v_t.shape(), 1.0, &mut rng);
    let blind = Fixed::new(out.clone());
    let guided = eval(&blind, |m, t, b| guide_flow_matching_loss(m, t, b, &gb));
    let plain = flow_loss(&blind, &gb.flow, &gb.class, None);
    assert!((guided - plain).abs() <= 1e-6 * plain);
}

#[test]
fn guide_loss_at_zero_scale_is_conditional_flow_loss() {
    let mut rng = Rng::new(4);
    let gb = guidance_batch(6, Some(0.0), &mut rng);
    let model = Affine::random(&mut rng);
    let guided = eval(&model, |m, t, b| guide_flow_matching_loss(m, t, b, &gb));
    let plain = flow_loss(&model, &gb.flow, &gb.class, Some(&gb.w));
    assert!((guided - plain).abs() <= 1e-6 * plain);
}

#[test]
fn guide_loss_of_teacher_consistent_model_is_teacher_flow_loss() {
    let mut rng = Rng::new(5);
    for _ in 0..10 {
        let teacher = Affine::teacher(&mut rng);
        let student = Affine::consistent_with(&teacher);
        let gb = guidance_batch(8, None, &mut rng);
        let guided = eval(&student, |m, t, b| guide_flow_matching_loss(m, t, b, &gb));
        let teacher_loss = flow_loss(&teacher, &gb.flow, &gb.class, None);
        assert!(
            (guided - teacher_loss).abs() <= 1e-5 * teacher_loss,
            "{guided} vs {teacher_loss}"
        );
    }
}

#[test]
fn distill_fixed_points() {
    let mut rng = Rng::new(6);
    let teacher = Affine::teacher(&mut rng);
    let gb = guidance_batch(8, None, &mut rng);

    let target = teacher_guided_velocity(&teacher, &gb).unwrap();
    let forced = Fixed::new(target);
    assert_eq!(eval(&forced, |m, t, b| distill_loss(m, t, b, &teacher, &gb)), 0.0);
    let consistent = Affine::consistent_with(&teacher);
    assert!(eval(&consistent, |m, t, b| distill_loss(m, t, b, &teacher, &gb)) < 1e-10);

    // At w = 0 the target is the plain conditional teacher.
    let g0 = guidance_batch(8, Some(0.0), &mut rng);
    let cond = Conditioning {
        t: &g0.flow.t,
        class: &g0.class,
        w: None,
    };
    let plain = teacher.predict(&g0.flow.x_t, &cond).unwrap();
    assert!(teacher_guided_velocity(&teacher, &g0).unwrap().bit_eq(&plain));
}

/// Trains `student` on the distillation loss for `steps` Adam steps on a
/// fixed batch; returns the loss per step.
fn distill_run(student: &mut Affine, teacher: &Affine, batches: &[GuidanceBatch], steps: usize, lr: f32) -> Vec<f32> {
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        ..Default::default()
    });
    (0..steps)
        .map(|s| {
            let gb = &batches[s % batches.len()];
            let mut tape = Tape::new();
            let bind = student.params.bind(&mut tape);
            let loss = distill_loss(&*student, &mut tape, &bind, teacher, gb).unwrap();
            let value = tape.value(loss).item().unwrap();
            let mut grads = tape.backward(loss).unwrap();
            student.params.apply_grads(&mut opt, &bind, &mut grads).unwrap();
            value
        })
        .collect()
}

#[test]
fn distill_loss_decreases_on_a_tiny_batch() {
    let mut rng = Rng::new(7);
    let teacher = Affine::teacher(&mut rng);
    let mut student = Affine::random(&mut rng);
    let batch = vec![guidance_batch(4, None, &mut rng)];
    let losses = distill_run(&mut student, &teacher, &batch, 100, 1e-2);
    assert!(losses[0] > 0.0);
    let first: f32 = losses[..10].iter().sum();
    let last: f32 = losses[90..].iter().sum();
    assert!(last < 0.5 * first, "first window {first}, last window {last}");
    for w in losses.chunks(20).collect::<Vec<_>>().windows(2) {
        let (a, b): (f32, f32) = (w[0].iter().sum(), w[1].iter().sum());
        assert!(b < a, "window sums not decreasing: {a} -> {b}");
    }
}

#[test]
fn converged_student_keeps_teacher_null_branch() {
    let mut rng = Rng::new(8);
    let teacher = Affine::teacher(&mut rng);
    let mut student = Affine::random(&mut rng);
    let batches: Vec<_> = (0..16).map(|_| guidance_batch(8, None, &mut rng)).collect();
    distill_run(&mut student, &teacher, &batches, 3000, 2e-2);

    let probe = guidance_batch(8, None, &mut rng);
    let nulls = vec![None; 8];
    let v_student = student
        .predict(
            &probe.flow.x_t,
            &Conditioning {
                t: &probe.flow.t,
                class: &nulls,
                w: Some(&probe.w),
            },
        )
        .unwrap();
    let v_teacher = teacher
        .predict(
            &probe.flow.x_t,
            &Conditioning {
                t: &probe.flow.t,
                class: &nulls,
                w: None,
            },
        )
        .unwrap();
    let rel = (v_student.mse(&v_teacher).unwrap() / v_teacher.mean_square()).sqrt();
    assert!(rel < 0.05, "relative null-branch gap {rel}");
}
