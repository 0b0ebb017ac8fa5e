//! Tape gradients against finite differences and hand derivations.

mod support;

use dcgen::{Rng, Tape, Tensor};
use support::gradcheck::{check_composite, check_gate_model, check_op, op_cases, Composite, INSTANCES, TOL};

#[test]
fn every_primitive_op_matches_finite_differences() {
    let cases = op_cases();
    assert!(cases.len() >= 20);
    for case in &cases {
        let errs = check_op(case);
        assert!(errs.len() >= INSTANCES);
        for (i, e) in errs.iter().enumerate() {
            assert!(*e <= TOL, "{}: instance {i}: rel err {e:.3e}", case.name);
        }
    }
}

#[test]
fn flow_matching_loss_matches_finite_differences() {
    for (i, e) in check_composite(Composite::FlowMatching).iter().enumerate() {
        assert!(*e <= TOL, "instance {i}: rel err {e:.3e}");
    }
}

#[test]
fn guide_flow_matching_loss_matches_finite_differences() {
    for (i, e) in check_composite(Composite::GuideFlowMatching).iter().enumerate() {
        assert!(*e <= TOL, "instance {i}: rel err {e:.3e}");
    }
}

#[test]
fn guide_loss_on_two_parameter_model() {
    for (i, (closed, fd)) in check_gate_model().into_iter().enumerate() {
        assert!(closed <= 1e-5, "instance {i}: closed-form rel err {closed:.3e}");
        assert!(fd <= TOL, "instance {i}: finite-difference rel err {fd:.3e}");
    }
}
#[test]
fn square_sum_example() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![2.0, -1.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    let g = g.get(x).unwrap().data().to_vec();
    let f = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
    let h = 1e-3;
    let fd = [
        (f([2.0 + h, -1.0]) - f([2.0 - h, -1.0])) / (2.0 * h),
        (f([2.0, -1.0 + h]) - f([2.0, -1.0 - h])) / (2.0 * h),
    ];
    for (a, b) in g.iter().zip(fd) {
        assert!((*a as f64 - b).abs() < 1e-6, "{g:?} vs {fd:?}");
    }
    assert_eq!(g, vec![4.0, -2.0]);
}

#[test]
fn two_layer_chain_matches_hand_derivation() {
    // loss = Σ (W x)²  ⇒  ∂W = 2 (W x) xᵀ, ∂x = 2 Wᵀ (W x).
    let mut rng = Rng::new(21);
    let (m, k) = (3, 4);
    let w = Tensor::randn(&[m, k], 1.0, &mut rng);
    let x = Tensor::randn(&[k, 1], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (wv, xv) = (tape.param(w.clone()), tape.param(x.clone()));
    let y = tape.matmul(wv, xv).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();

    let wx: Vec<f64> = (0..m)
        .map(|i| (0..k).map(|j| w.data()[i * k + j] as f64 * x.data()[j] as f64).sum())
        .collect();
    for i in 0..m {
        for j in 0..k {
            let want = 2.0 * wx[i] * x.data()[j] as f64;
            let got = g.get(wv).unwrap().data()[i * k + j] as f64;
            assert!((got - want).abs() < 1e-5 * (1.0 + want.abs()));
        }
    }
    for j in 0..k {
        let want: f64 = (0..m).map(|i| 2.0 * w.data()[i * k + j] as f64 * wx[i]).sum();
        let got = g.get(xv).unwrap().data()[j] as f64;
        assert!((got - want).abs() < 1e-5 * (1.0 + want.abs()));
    }
}
