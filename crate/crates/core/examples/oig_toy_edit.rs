//! Representation-guided edit on the 2-D mixture: cat modes to dog modes.
//!
//! Compares the feature distance to the source with and without the
//! feature-triplet term.

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AnalyticGmmBackend;
use oig_core::ddim::translate;
use oig_core::guidance::{sample_oig, GuidanceConfig, PromptPair, SamplerOptions};
use oig_core::schedule::DiffusionSchedule;
use oig_core::tensor;

fn main() -> oig_core::Result<()> {
    let bundle = AnalyticGmmBackend::toy_2d(0).into_bundle();
    let prompts = PromptPair::embed(bundle.encoder.as_ref(), "a photo of a cat", "a photo of a dog")?;
    let schedule = DiffusionSchedule::default_with_steps(50)?;
    let x0 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-1.05, 0.42]).unwrap();
    let t0 = schedule.timestep(0)?;
    let src_feats = bundle.features.features(&x0, t0, &prompts.y_src)?;

    let plain = translate(
        &x0,
        &prompts.y_src,
        &prompts.y_tgt,
        &schedule,
        bundle.predictor.as_ref(),
    )?;
    println!("source            {x0:.4}");
    println!("plain translation {plain:.4}");

    for lambda2 in [0.0, 0.5, 1.0, 1.5] {
        let cfg = GuidanceConfig {
            lambda2,
            ..GuidanceConfig::default()
        };
        let out = sample_oig(&x0, &prompts, &schedule, &bundle, &cfg, &SamplerOptions::default())?;
        let feats = bundle.features.features(&out.latent, t0, &prompts.y_tgt)?;
        let peak = out.steps.iter().map(|s| s.grad_norm).fold(0.0, f64::max);
        println!(
            "lambda2={lambda2:<4} edited {:.4}  feature distance {:.4}  peak grad {:.4}",
            out.latent,
            tensor::distance(&feats, &src_feats)?,
            peak
        );
    }
    Ok(())
}
