use std::sync::Arc;

use super::{BackendBundle, FeatureExtractor, IdentityCodec, NoisePredictor, PromptEmbedding, VocabularyEncoder};
use crate::error::{Error, Result};
use crate::schedule::Timestep;
use crate::tensor::{self, Latent};

/// Predicts the same array `c` for every input.
///
/// Every trajectory then stays on `x_t = √α_t·u + √(1−α_t)·c` for a fixed
/// `u`, which makes DDIM inversion and reversal exact inverses.
#[derive(Debug, Clone)]
pub struct ConstantEpsilonBackend {
    c: Latent,
    encoder: VocabularyEncoder,
}

impl ConstantEpsilonBackend {
    pub fn new(c: Latent) -> Self {
        let encoder = VocabularyEncoder::new(16, 0, c.len());
        Self { c, encoder }
    }

    pub fn constant(&self) -> &Latent {
        &self.c
    }

    pub fn encoder(&self) -> &VocabularyEncoder {
        &self.encoder
    }

    /// Bundle with identity features, identity codec and a vocabulary encoder.
    pub fn into_bundle(self) -> BackendBundle {
        let encoder = Arc::new(self.encoder.clone());
        let shared = Arc::new(self);
        BackendBundle {
            predictor: shared.clone(),
            features: shared,
            encoder,
            codec: Arc::new(IdentityCodec),
        }
    }

    fn check(&self, x: &Latent) -> Result<()> {
        if x.shape() != self.c.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.c.shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl NoisePredictor for ConstantEpsilonBackend {
    fn epsilon(&self, x: &Latent, _t: Timestep, _y: &PromptEmbedding) -> Result<Latent> {
        self.check(x)?;
        Ok(self.c.clone())
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn epsilon_vjp(&self, x: &Latent, _t: Timestep, _y: &PromptEmbedding, _v: &Latent) -> Result<Latent> {
        self.check(x)?;
        Ok(tensor::zeros_like(x))
    }
}

impl FeatureExtractor for ConstantEpsilonBackend {
    fn layer_selector(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Latent, _t: Timestep, _y: &PromptEmbedding) -> Result<Latent> {
        self.check(x)?;
        Ok(x.clone())
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn features_vjp(&self, x: &Latent, _t: Timestep, _y: &PromptEmbedding, v: &Latent) -> Result<Latent> {
        self.check(x)?;
        Ok(v.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::JointEncoder;
    use crate::schedule::DiffusionSchedule;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn output_ignores_inputs() {
        let c = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let b = ConstantEpsilonBackend::new(c.clone());
        let s = DiffusionSchedule::default_with_steps(10).unwrap();
        let y = b.encoder().embed_prompt("anything").unwrap();
        for pos in 0..=10 {
            let x = ArrayD::from_elem(IxDyn(&[2, 2]), pos as f64);
            assert_eq!(b.epsilon(&x, s.timestep(pos).unwrap(), &y).unwrap(), c);
        }
        assert!(b
            .epsilon(&ArrayD::zeros(IxDyn(&[3])), s.timestep(1).unwrap(), &y)
            .is_err());
    }
}
