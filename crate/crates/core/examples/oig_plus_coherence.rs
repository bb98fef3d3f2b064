//! Interleaved sampling with cycle-consistency guidance.
//!
//! Prints the per-step cycle objective and the final distance between the
//! plain reverse of the guided source terminal and the edited latent.

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AnalyticGmmBackend;
use oig_core::coherence::sample_oig_plus;
use oig_core::guidance::{GuidanceConfig, PromptPair, SamplerOptions};
use oig_core::schedule::DiffusionSchedule;

fn main() -> oig_core::Result<()> {
    let bundle = AnalyticGmmBackend::toy_2d(1).into_bundle();
    let prompts = PromptPair::embed(bundle.encoder.as_ref(), "a photo of a cat", "a photo of a dog")?;
    let schedule = DiffusionSchedule::default_with_steps(20)?;
    let x0 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.95, -0.55]).unwrap();
    let opts = SamplerOptions::default();

    for (lambda3, lambda4) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let cfg = GuidanceConfig {
            lambda3,
            lambda4,
            ..GuidanceConfig::default()
        };
        let out = sample_oig_plus(&x0, &prompts, &schedule, &bundle, &cfg, &opts)?;
        println!(
            "lambda3={lambda3} lambda4={lambda4}: edited {:.4}, final cycle {:.4}",
            out.latent,
            out.final_cycle.unwrap_or(f64::NAN)
        );
        if lambda4 > 0.0 && lambda3 > 0.0 {
            for s in out.steps.iter().step_by(4) {
                println!(
                    "  position {:>2}  L_dist {:.4}  L_cycle {:.4}",
                    s.position,
                    s.l_dist,
                    s.l_cycle.unwrap_or(0.0)
                );
            }
        }
    }
    Ok(())
}
