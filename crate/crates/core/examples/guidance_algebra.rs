//! Classifier-free guidance and recovering the conditional velocity from a
//! guidance-distilled output.

use dcgen::objectives::{cfg_combine, corrected_velocity};
use dcgen::{Rng, Tensor};

fn main() -> dcgen::Result<()> {
    let mut rng = Rng::new(0);
    let v_cond = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    let v_uncond = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    for w in [0.0, 1.0, 3.0, 7.5] {
        let guided = cfg_combine(&v_cond, &v_uncond, w)?;
        let back = corrected_velocity(&guided, &v_uncond, w)?;
        let naive_err = guided.mse(&v_cond)?;
        let corrected_err = back.mse(&v_cond)?;
        println!("w={w:<4} guided vs conditional mse {naive_err:.4}, corrected {corrected_err:.2e}");
    }
    Ok(())
}
