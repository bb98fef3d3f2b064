//! Plug a user-supplied model into the pipeline through the adapter registry.
//!
//! The model here is a tiny linear denoiser; a real adapter would wrap a
//! pretrained network and its vector-Jacobian products the same way.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::{
    AdapterRegistry, BackendBundle, FeatureExtractor, IdentityCodec, NoisePredictor, PromptEmbedding, VocabularyEncoder,
};
use oig_core::pipeline::{run_edit, EditConfig, EditTask};
use oig_core::schedule::Timestep;
use oig_core::tensor::Latent;

/// Exact noise prediction for a unit-variance Gaussian prior whose mean
/// depends on the prompt: `ε(x, t, y) = √(1−α)·(x − √α·μ(y))`.
struct LinearDenoiser;

impl LinearDenoiser {
    fn gain(t: Timestep) -> f64 {
        (1.0 - t.alpha).sqrt()
    }

    fn mean(x: &Latent, y: &PromptEmbedding) -> Latent {
        let n = y.vector.len();
        let mut i = 0;
        x.mapv(|_| {
            let v = if n == 0 { 0.0 } else { 0.5 * y.vector[i % n] };
            i += 1;
            v
        })
    }
}

impl NoisePredictor for LinearDenoiser {
    fn epsilon(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> oig_core::Result<Latent> {
        Ok((x - &(Self::mean(x, y) * t.alpha.sqrt())) * Self::gain(t))
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn epsilon_vjp(&self, _x: &Latent, t: Timestep, _y: &PromptEmbedding, v: &Latent) -> oig_core::Result<Latent> {
        Ok(v * Self::gain(t))
    }
}

impl FeatureExtractor for LinearDenoiser {
    fn layer_selector(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Latent, _t: Timestep, _y: &PromptEmbedding) -> oig_core::Result<Latent> {
        Ok(x.clone())
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn features_vjp(&self, _x: &Latent, _t: Timestep, _y: &PromptEmbedding, v: &Latent) -> oig_core::Result<Latent> {
        Ok(v.clone())
    }
}

fn main() -> oig_core::Result<()> {
    let mut registry = AdapterRegistry::new();
    registry.register("linear", |spec| {
        let len = spec.latent_shape.iter().product();
        let model = Arc::new(LinearDenoiser);
        Ok(BackendBundle {
            predictor: model.clone(),
            features: model,
            encoder: Arc::new(VocabularyEncoder::new(16, 0, len)),
            codec: Arc::new(IdentityCodec),
        })
    });

    let dir = std::env::temp_dir().join(format!("oig-custom-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| oig_core::Error::io(&dir, e))?;
    let src = dir.join("src.png");
    let img = ArrayD::from_shape_fn(IxDyn(&[4, 4, 3]), |ix| (ix[0] * 4 + ix[1]) as f64 / 15.0);
    oig_core::imageio::save_rgb(&src, &img)?;

    let overrides: Vec<(String, String)> = [
        ("backend.kind", "pretrained"),
        ("backend.checkpoint", "linear://unit-prior"),
        ("backend.latent_shape", "4,4,3"),
        ("schedule.grid_steps", "10"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let config = EditConfig::load(None, &overrides)?;
    println!(
        "classifier-free scale for pretrained backends: {}",
        config.guidance.cfg_scale
    );

    let task = EditTask::new(&src, "a cat", "a dog", dir.join("edited.png"));
    let out = run_edit(&task, &config, &registry)?;
    for s in &out.trace.steps {
        println!(
            "position {:>2}  L_dist {:.4}  grad {:.4}",
            s.position, s.l_dist, s.grad_norm
        );
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
