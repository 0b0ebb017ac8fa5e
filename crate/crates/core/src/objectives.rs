//! Losses and velocity algebra.
//!
//! All losses reduce with an arithmetic mean over batch and elements.
//! Guidance algebra comes in two flavours: `Tensor` functions computed in
//! f64 (used for evaluation and sampling) and tape functions that take one
//! guidance scale per batch entry (used in training losses).

use crate::error::{contract, Error, Result};
use crate::models::{Binding, Conditioning, DiTModel, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Anything that predicts a velocity field on a tape.
pub trait VelocityModel {
    fn params(&self) -> &ParamStore;

    fn velocity(&self, tape: &mut Tape, bind: &Binding, x: Var, cond: &Conditioning<'_>) -> Result<Var>;

    /// Gradient-free prediction.
    fn predict(&self, x: &Tensor, cond: &Conditioning<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params().bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.velocity(&mut tape, &bind, xv, cond)?;
        Ok(tape.value(out).clone())
    }
}

impl VelocityModel for DiTModel {
    fn params(&self) -> &ParamStore {
        DiTModel::params(self)
    }

    fn velocity(&self, tape: &mut Tape, bind: &Binding, x: Var, cond: &Conditioning<'_>) -> Result<Var> {
        self.forward(tape, bind, x, cond)
    }
}

/// One point on the linear noise-to-data path.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f32,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

impl FlowSample {
    /// `x_t = (1−t)·x0 + t·x1`, `v_t = x1 − x0`.
    pub fn at(x1: &Tensor, x0: &Tensor, t: f32) -> Result<Self> {
        let x_t = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
        let v_t = x1.sub(x0)?;
        Ok(Self {
            x0: x0.clone(),
            x1: x1.clone(),
            t,
            x_t,
            v_t,
        })
    }
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` for a data latent.
pub fn make_flow_sample(x1: &Tensor, rng: &mut Rng) -> FlowSample {
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    let t = rng.uniform();
    FlowSample::at(x1, &x0, t).expect("noise has the data shape")
}

/// Stacked flow samples.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x_t: Tensor,
    pub v_t: Tensor,
    pub t: Vec<f32>,
}

impl FlowBatch {
    pub fn from_samples(samples: &[FlowSample]) -> Result<Self> {
        let x_t: Vec<Tensor> = samples.iter().map(|s| s.x_t.clone()).collect();
        let v_t: Vec<Tensor> = samples.iter().map(|s| s.v_t.clone()).collect();
        Ok(Self {
            x_t: Tensor::stack(&x_t)?,
            v_t: Tensor::stack(&v_t)?,
            t: samples.iter().map(|s| s.t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Flow samples with a class and a guidance scale per entry.
#[derive(Clone, Debug)]
pub struct GuidanceBatch {
    pub flow: FlowBatch,
    /// `None` entries use the null class in the conditional call too.
    pub class: Vec<Option<usize>>,
    pub w: Vec<f32>,
}

impl GuidanceBatch {
    pub fn new(flow: FlowBatch, class: Vec<Option<usize>>, w: Vec<f32>) -> Result<Self> {
        if class.len() != flow.len() || w.len() != flow.len() {
            return Err(contract!("guidance batch fields disagree on batch size"));
        }
        Ok(Self { flow, class, w })
    }
}

/// Mean over batch and elements of `‖v_model(x_t, c, t) − v_t‖²`.
pub fn flow_matching_loss<M: VelocityModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    bind: &Binding,
    batch: &FlowBatch,
    class: &[Option<usize>],
    w: Option<&[f32]>,
) -> Result<Var> {
    let x = tape.constant(batch.x_t.clone());
    let cond = Conditioning { t: &batch.t, class, w };
    let v = model.velocity(tape, bind, x, &cond)?;
    let target = tape.constant(batch.v_t.clone());
    tape.mse(v, target)
}

/// Guided velocity `(1+w)·v_cond − w·v_uncond`, evaluated as
/// `v_cond + w·(v_cond − v_uncond)`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, w: f32) -> Result<Tensor> {
    let w = w as f64;
    v_cond.zip_map(v_uncond, |c, u| {
        let (c, u) = (c as f64, u as f64);
        (c + w * (c - u)) as f32
    })
}

/// Raw conditional velocity recovered from a guidance-distilled model:
/// `(v_cond + w·v_uncond) / (1 + w)`.
pub fn corrected_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f32) -> Result<Tensor> {
    if w == -1.0 {
        return Err(Error::Domain("corrected velocity is undefined at w = -1".into()));
    }
    if w == 0.0 {
        v_cond.check_same_shape(v_uncond)?;
        return Ok(v_cond.clone());
    }
    let w = w as f64;
    v_cond.zip_map(v_uncond, |c, u| ((c as f64 + w * u as f64) / (1.0 + w)) as f32)
}

fn per_entry<R>(
    v: &Tensor,
    w: &[f32],
    f: impl Fn(&Tensor, &Tensor, f32) -> Result<R>,
    other: &Tensor,
) -> Result<Vec<R>> {
    let b = v.shape().first().copied().unwrap_or(0);
    if w.len() != b {
        return Err(contract!("{} guidance scales for batch {b}", w.len()));
    }
    (0..b).map(|i| f(&v.index0(i)?, &other.index0(i)?, w[i])).collect()
}

/// [`cfg_combine`] with one scale per leading-axis entry.
pub fn cfg_combine_batch(v_cond: &Tensor, v_uncond: &Tensor, w: &[f32]) -> Result<Tensor> {
    v_cond.check_same_shape(v_uncond)?;
    let parts = per_entry(v_cond, w, cfg_combine, v_uncond)?;
    Tensor::stack(&parts)?.reshape(v_cond.shape())
}

/// [`corrected_velocity`] with one scale per leading-axis entry.
pub fn corrected_velocity_batch(v_cond: &Tensor, v_uncond: &Tensor, w: &[f32]) -> Result<Tensor> {
    v_cond.check_same_shape(v_uncond)?;
    let parts = per_entry(v_cond, w, corrected_velocity, v_uncond)?;
    Tensor::stack(&parts)?.reshape(v_cond.shape())
}

/// Tensor shaped like `like` whose leading-axis entry `i` is filled with `f(w[i])`.
fn coefficients(like: &[usize], w: &[f32], f: impl Fn(f32) -> f32) -> Result<Tensor> {
    let b = like[0];
    if w.len() != b {
        return Err(contract!("{} guidance scales for batch {b}", w.len()));
    }
    let per: usize = like[1..].iter().product();
    let data = w.iter().flat_map(|&wi| std::iter::repeat_n(f(wi), per)).collect();
    Tensor::new(like.to_vec(), data)
}

/// Tape form of [`cfg_combine`] with per-entry scales.
pub fn cfg_combine_var(tape: &mut Tape, v_cond: Var, v_uncond: Var, w: &[f32]) -> Result<Var> {
    let shape = tape.shape(v_cond).to_vec();
    let k = tape.constant(coefficients(&shape, w, |x| x)?);
    let diff = tape.sub(v_cond, v_uncond)?;
    let scaled = tape.mul(k, diff)?;
    tape.add(v_cond, scaled)
}

/// Tape form of [`corrected_velocity`] with per-entry scales.
pub fn corrected_velocity_var(tape: &mut Tape, v_cond: Var, v_uncond: Var, w: &[f32]) -> Result<Var> {
    if w.contains(&-1.0) {
        return Err(Error::Domain("corrected velocity is undefined at w = -1".into()));
    }
    let shape = tape.shape(v_cond).to_vec();
    let kc = tape.constant(coefficients(&shape, w, |x| 1.0 / (1.0 + x))?);
    let ku = tape.constant(coefficients(&shape, w, |x| x / (1.0 + x))?);
    let a = tape.mul(kc, v_cond)?;
    let b = tape.mul(ku, v_uncond)?;
    tape.add(a, b)
}

/// Flow matching on the corrected velocity of a guidance-distilled model:
/// two model calls (class and ∅) at the same `x_t, t, w`.
pub fn guide_flow_matching_loss<M: VelocityModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    bind: &Binding,
    batch: &GuidanceBatch,
) -> Result<Var> {
    let v_hat = corrected_prediction(model, tape, bind, batch)?;
    let target = tape.constant(batch.flow.v_t.clone());
    tape.mse(v_hat, target)
}

/// Corrected velocity of `model` on a guidance batch, on the tape.
pub fn corrected_prediction<M: VelocityModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    bind: &Binding,
    batch: &GuidanceBatch,
) -> Result<Var> {
    let x = tape.constant(batch.flow.x_t.clone());
    let nulls = vec![None; batch.class.len()];
    let cond = Conditioning {
        t: &batch.flow.t,
        class: &batch.class,
        w: Some(&batch.w),
    };
    let uncond = Conditioning { class: &nulls, ..cond };
    let v_c = model.velocity(tape, bind, x, &cond)?;
    let v_u = model.velocity(tape, bind, x, &uncond)?;
    corrected_velocity_var(tape, v_c, v_u, &batch.w)
}

/// Teacher's guided velocity `v_θ^w` for a batch (two gradient-free calls).
pub fn teacher_guided_velocity<M: VelocityModel + ?Sized>(teacher: &M, batch: &GuidanceBatch) -> Result<Tensor> {
    let nulls = vec![None; batch.class.len()];
    let cond = Conditioning {
        t: &batch.flow.t,
        class: &batch.class,
        w: None,
    };
    let v_c = teacher.predict(&batch.flow.x_t, &cond)?;
    let v_u = teacher.predict(&batch.flow.x_t, &Conditioning { class: &nulls, ..cond })?;
    cfg_combine_batch(&v_c, &v_u, &batch.w)
}

/// `‖v_student(x_t, c, t, w) − v_teacher^w(x_t, c, t)‖²`, teacher without gradient.
pub fn distill_loss<S: VelocityModel + ?Sized, T: VelocityModel + ?Sized>(
    student: &S,
    tape: &mut Tape,
    bind: &Binding,
    teacher: &T,
    batch: &GuidanceBatch,
) -> Result<Var> {
    let target = teacher_guided_velocity(teacher, batch)?;
    let x = tape.constant(batch.flow.x_t.clone());
    let cond = Conditioning {
        t: &batch.flow.t,
        class: &batch.class,
        w: Some(&batch.w),
    };
    let v = student.velocity(tape, bind, x, &cond)?;
    let target = tape.constant(target);
    tape.mse(v, target)
}

/// Non-overlapping `r×r` window average of an `[H, W, D]` or `[B, H, W, D]` field.
pub fn spatial_downsample(e: &Tensor, r: usize) -> Result<Tensor> {
    if e.rank() != 3 && e.rank() != 4 {
        return Err(contract!(
            "spatial_downsample expects [H, W, D] or [B, H, W, D], got {:?}",
            e.shape()
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(e.clone());
    let y = tape.avg_pool(x, r)?;
    Ok(tape.value(y).clone())
}

/// Mean-square distance between the new embedding and the pooled pretrained one.
pub fn alignment_loss(tape: &mut Tape, e_phi: Var, e: Var, r: usize) -> Result<Var> {
    let pooled = tape.avg_pool(e, r)?;
    if tape.shape(pooled) != tape.shape(e_phi) {
        return Err(contract!(
            "downsampled embedding {:?} does not match new embedding {:?}",
            tape.shape(pooled),
            tape.shape(e_phi)
        ));
    }
    tape.mse(e_phi, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn cfg_examples() {
        let (a, b) = (scalar(3.0), scalar(1.0));
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap().data(), &[5.0]);
        assert_eq!(cfg_combine(&a, &b, 0.0).unwrap().data(), &[3.0]);
        assert_eq!(cfg_combine(&a, &a, 4.2).unwrap().data(), &[3.0]);
    }

    #[test]
    fn corrected_examples() {
        let (a, b) = (scalar(3.0), scalar(1.0));
        assert_eq!(corrected_velocity(&a, &b, 1.0).unwrap().data(), &[2.0]);
        assert_eq!(corrected_velocity(&a, &b, 0.0).unwrap().data(), &[3.0]);
        assert!(matches!(corrected_velocity(&a, &b, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_sample_endpoints() {
        let x1 = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let x0 = Tensor::from_vec(vec![0.3, 0.1, -0.7]);
        assert_eq!(FlowSample::at(&x1, &x0, 0.0).unwrap().x_t, x0);
        assert_eq!(FlowSample::at(&x1, &x0, 1.0).unwrap().x_t, x1);
        let same = FlowSample::at(&x1, &x1, 0.37).unwrap();
        assert!(same.v_t.data().iter().all(|&v| v == 0.0));
        assert_eq!(same.x_t, x1);
    }

    #[test]
    fn downsample_examples() {
        let e = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_downsample(&e, 2).unwrap().data(), &[2.5]);
        assert_eq!(spatial_downsample(&e, 1).unwrap(), e);
        let c = Tensor::full(&[4, 4, 3], 0.7);
        assert!(spatial_downsample(&c, 2).unwrap().data().iter().all(|&v| v == 0.7));
        assert!(spatial_downsample(&e, 3).is_err());
    }

    #[test]
    fn alignment_loss_offsets() {
        let mut rng = Rng::new(4);
        let e = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let pooled = spatial_downsample(&e, 2).unwrap();
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let exact = tape.constant(pooled.clone());
        let l0 = alignment_loss(&mut tape, exact, ev, 2).unwrap();
        assert_eq!(tape.value(l0).item().unwrap(), 0.0);
        let shifted = tape.constant(pooled.map(|v| v + 0.25));
        let l1 = alignment_loss(&mut tape, shifted, ev, 2).unwrap();
        assert!((tape.value(l1).item().unwrap() - 0.0625).abs() < 1e-6);
        let wrong = tape.constant(Tensor::zeros(&[2, 4, 4, 3]));
        assert!(alignment_loss(&mut tape, wrong, ev, 2).is_err());
    }
}
