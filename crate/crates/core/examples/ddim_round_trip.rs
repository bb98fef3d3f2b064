//! Deterministic inversion followed by reversal under the same prompt.
//!
//! With a constant noise predictor the two chains are exact inverses; with
//! the mixture backend the error shrinks as the grid is refined.

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::{AnalyticGmmBackend, ConstantEpsilonBackend, JointEncoder};
use oig_core::ddim::{invert_between, reverse_between};
use oig_core::schedule::DiffusionSchedule;
use oig_core::tensor;

fn main() -> oig_core::Result<()> {
    let x0 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.9, 0.45]).unwrap();

    let constant = ConstantEpsilonBackend::new(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.2]).unwrap());
    let y = constant.encoder().embed_prompt("a photo of a cat")?;
    let s = DiffusionSchedule::default_with_steps(50)?;
    let xt = invert_between(&x0, 0, s.steps(), &y, &s, &constant)?;
    let back = reverse_between(&xt, s.steps(), 0, &y, &s, &constant)?;
    println!("constant noise, T=50: error {:e}", tensor::distance(&back, &x0)?);

    let gmm = AnalyticGmmBackend::toy_2d(0);
    let y = gmm.embed_prompt("a photo of a cat")?;
    for steps in [10, 25, 50, 100, 200] {
        let s = DiffusionSchedule::default_with_steps(steps)?;
        let xt = invert_between(&x0, 0, steps, &y, &s, &gmm)?;
        let back = reverse_between(&xt, steps, 0, &y, &s, &gmm)?;
        println!(
            "mixture, T={steps:>3}: terminal {xt:.4}, error {:.3e}",
            tensor::distance(&back, &x0)?
        );
    }
    Ok(())
}
