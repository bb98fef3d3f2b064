//! Model interfaces and the desk-scale backends.
//!
//! A sampler needs four pieces: a noise predictor `ε(x, t, y)`, an
//! intermediate feature map `M(x, t, y)`, a joint text/image encoder used
//! for cosine similarity, and a latent codec. Guidance objectives need
//! gradients through all of them, so each interface carries an optional
//! vector-Jacobian product. Backends that cannot differentiate leave the
//! default implementations, and the samplers fall back to finite
//! differences when the configuration allows it.

use std::sync::Arc;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::schedule::Timestep;
use crate::tensor::{self, Latent};

mod adapter;
mod constant;
mod encoder;
mod gmm;
mod gradient;

pub use adapter::{AdapterRegistry, PretrainedAdapterSpec, DEFAULT_LAYER_SELECTOR};
pub use constant::ConstantEpsilonBackend;
pub use encoder::{tokenize, VocabularyEncoder};
pub use gmm::{AnalyticGmmBackend, MixtureComponent};
pub use gradient::{finite_difference_gradient, gradient_of, FiniteDifference, GradientMode, Objective};

/// Conditioning embedding `y` of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub prompt_text: String,
    pub tokens: Vec<String>,
    pub token_embeddings: Vec<Array1<f64>>,
    pub vector: Array1<f64>,
}

impl PromptEmbedding {
    /// The empty (unconditional) prompt of a given dimension.
    pub fn null(dim: usize) -> Self {
        Self {
            prompt_text: String::new(),
            tokens: Vec::new(),
            token_embeddings: Vec::new(),
            vector: Array1::zeros(dim),
        }
    }

    pub fn is_null(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Noise prediction network `ε_θ`.
pub trait NoisePredictor: Send + Sync {
    /// Predict the noise in `x` at `t`; the output has the shape of `x`.
    fn epsilon(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> Result<Latent>;

    fn supports_differentiation(&self) -> bool {
        false
    }

    /// `(∂ε/∂x)ᵀ v`.
    fn epsilon_vjp(&self, _x: &Latent, _t: Timestep, _y: &PromptEmbedding, _v: &Latent) -> Result<Latent> {
        Err(Error::NotDifferentiable("noise predictor"))
    }
}

/// Intermediate representation `M(x, t, y)` of the noise predictor.
pub trait FeatureExtractor: Send + Sync {
    fn layer_selector(&self) -> &str;

    fn features(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> Result<Latent>;

    fn supports_differentiation(&self) -> bool {
        false
    }

    /// `(∂M/∂x)ᵀ v`.
    fn features_vjp(&self, _x: &Latent, _t: Timestep, _y: &PromptEmbedding, _v: &Latent) -> Result<Latent> {
        Err(Error::NotDifferentiable("feature extractor"))
    }
}

/// Text and image encoders sharing one embedding space.
pub trait JointEncoder: Send + Sync {
    /// Tokenize and embed a prompt. Empty prompts are rejected.
    fn embed_prompt(&self, prompt: &str) -> Result<PromptEmbedding>;

    /// The unconditional embedding used by classifier-free guidance.
    fn null_prompt(&self) -> PromptEmbedding;

    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        Ok(self.embed_prompt(prompt)?.vector)
    }

    /// Embed an image given in the model pixel range `[-1, 1]`.
    fn encode_image(&self, image: &Latent) -> Result<Array1<f64>>;

    fn supports_differentiation(&self) -> bool {
        false
    }

    /// `(∂f_img/∂image)ᵀ v`.
    fn encode_image_vjp(&self, _image: &Latent, _v: &Array1<f64>) -> Result<Latent> {
        Err(Error::NotDifferentiable("image encoder"))
    }
}

/// Maps pixel images to latents and back.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Latent) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Latent>;

    /// Bound on `‖decode(encode(x)) − x‖_∞`.
    fn reconstruction_tolerance(&self) -> f64 {
        0.0
    }

    fn supports_differentiation(&self) -> bool {
        false
    }

    fn decode_vjp(&self, _latent: &Latent, _v: &Latent) -> Result<Latent> {
        Err(Error::NotDifferentiable("latent codec"))
    }
}

/// Pixel-space backends: the latent is the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Latent) -> Result<Latent> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &Latent) -> Result<Latent> {
        Ok(latent.clone())
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn decode_vjp(&self, _latent: &Latent, v: &Latent) -> Result<Latent> {
        Ok(v.clone())
    }
}

/// Everything a sampler needs from a model.
#[derive(Clone)]
pub struct BackendBundle {
    pub predictor: Arc<dyn NoisePredictor>,
    pub features: Arc<dyn FeatureExtractor>,
    pub encoder: Arc<dyn JointEncoder>,
    pub codec: Arc<dyn LatentCodec>,
}

impl BackendBundle {
    /// True when every stage provides exact vector-Jacobian products.
    pub fn supports_differentiation(&self) -> bool {
        self.predictor.supports_differentiation()
            && self.features.supports_differentiation()
            && self.encoder.supports_differentiation()
            && self.codec.supports_differentiation()
    }
}

impl std::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("layer_selector", &self.features.layer_selector())
            .field("differentiable", &self.supports_differentiation())
            .finish()
    }
}

/// `ε(x,t,y_null) + w·(ε(x,t,y_cond) − ε(x,t,y_null))`.
///
/// `w = 1` returns the conditional prediction and `w = 0` the unconditional
/// one without evaluating the other branch.
pub fn classifier_free_epsilon(
    predictor: &dyn NoisePredictor,
    x: &Latent,
    t: Timestep,
    y_cond: &PromptEmbedding,
    y_null: &PromptEmbedding,
    w: f64,
) -> Result<Latent> {
    check_scale(w)?;
    if w == 1.0 {
        return predictor.epsilon(x, t, y_cond);
    }
    if w == 0.0 {
        return predictor.epsilon(x, t, y_null);
    }
    let uncond = predictor.epsilon(x, t, y_null)?;
    let cond = predictor.epsilon(x, t, y_cond)?;
    tensor::same_shape(&uncond, &cond)?;
    Ok(&uncond + &((&cond - &uncond) * w))
}

fn check_scale(w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "classifier-free scale must be finite and >= 0, got {w}"
        )));
    }
    Ok(())
}

/// A predictor decorated with classifier-free guidance at a fixed scale.
pub struct ClassifierFree<'a> {
    inner: &'a dyn NoisePredictor,
    null: PromptEmbedding,
    scale: f64,
}

impl<'a> ClassifierFree<'a> {
    pub fn new(inner: &'a dyn NoisePredictor, null: PromptEmbedding, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self { inner, null, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl NoisePredictor for ClassifierFree<'_> {
    fn epsilon(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> Result<Latent> {
        classifier_free_epsilon(self.inner, x, t, y, &self.null, self.scale)
    }

    fn supports_differentiation(&self) -> bool {
        self.inner.supports_differentiation()
    }

    fn epsilon_vjp(&self, x: &Latent, t: Timestep, y: &PromptEmbedding, v: &Latent) -> Result<Latent> {
        let w = self.scale;
        if w == 1.0 {
            return self.inner.epsilon_vjp(x, t, y, v);
        }
        if w == 0.0 {
            return self.inner.epsilon_vjp(x, t, &self.null, v);
        }
        let uncond = self.inner.epsilon_vjp(x, t, &self.null, v)?;
        let cond = self.inner.epsilon_vjp(x, t, y, v)?;
        Ok(uncond * (1.0 - w) + cond * w)
    }
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Gradient of `cos(a, b)` with respect to `a`.
pub fn cosine_similarity_grad(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Array1::zeros(a.len());
    }
    let cos = a.dot(b) / (na * nb);
    b / (na * nb) - a * (cos / (na * na))
}
