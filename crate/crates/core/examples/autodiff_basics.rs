//! Reverse-mode gradients on the tape: a tiny regression fitted by hand.

use dcgen::{Rng, Tape, Tensor};

fn main() -> dcgen::Result<()> {
    let mut rng = Rng::new(0);
    let x = Tensor::randn(&[32, 3], 1.0, &mut rng);
    let true_w = Tensor::new(vec![3, 1], vec![0.5, -2.0, 1.0])?;
    let y = {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(true_w));
        let yv = tape.matmul(xv, wv)?;
        tape.value(yv).clone()
    };

    let mut w = Tensor::zeros(&[3, 1]);
    for step in 0..200 {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = tape.matmul(xv, wv)?;
        let loss = tape.mse(pred, yv)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(wv).expect("w is a parameter");
        w = w.zip_map(g, |a, b| a - 0.1 * b)?;
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.6}", tape.value(loss).data()[0]);
        }
    }
    println!("fitted w = {:?}", w.data());
    Ok(())
}
