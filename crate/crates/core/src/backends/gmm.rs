//! Gaussian-mixture data with its exact optimal noise predictor.
//!
//! For data `x₀ ~ Σ_k w_k N(μ_k, diag(v_k))` and `x_t = √α x₀ + √(1−α) ε`,
//! the marginal of `x_t` is again a mixture with covariances
//! `C_k = α v_k + (1−α)`, and the MMSE noise predictor is
//! `ε*(x) = −√(1−α) ∇ log p_t(x)`. Its Jacobian is `−√(1−α)` times the
//! Hessian of the log density, which is symmetric, so the VJP is a
//! Hessian-vector product.
//!
//! Prompts condition the mixture through its weights:
//! `w_k(y) ∝ w_k exp(κ ⟨y, ℓ_k⟩)` with a label direction `ℓ_k` per
//! component. The null prompt recovers the base weights.

use std::sync::Arc;

use ndarray::{Array1, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    BackendBundle, FeatureExtractor, IdentityCodec, JointEncoder, LatentCodec, NoisePredictor, PromptEmbedding,
    VocabularyEncoder,
};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::schedule::Timestep;
use crate::tensor::Latent;

/// Gain of the toy mixture's linear feature map.
pub const TOY_FEATURE_GAIN: f64 = 0.1;

/// One mixture component with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    /// Direction in prompt-embedding space that selects this component.
    pub label: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AnalyticGmmBackend {
    shape: Vec<usize>,
    components: Vec<MixtureComponent>,
    conditioning: f64,
    feature_map: Array2<f64>,
    encoder: VocabularyEncoder,
    layer: String,
}

struct Posterior {
    resp: Vec<f64>,
    scores: Vec<Array1<f64>>,
    inv_cov: Vec<Array1<f64>>,
    mean_score: Array1<f64>,
}

impl AnalyticGmmBackend {
    pub fn new(
        shape: Vec<usize>,
        components: Vec<MixtureComponent>,
        conditioning: f64,
        feature_map: Array2<f64>,
        encoder: VocabularyEncoder,
    ) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "component {k} has dimension {}, latent dimension is {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidInput(format!("component {k} weight must be positive")));
            }
            if c.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("component {k} variances must be positive")));
            }
            if c.label.len() != encoder.dim() {
                return Err(Error::InvalidInput(format!(
                    "component {k} label has dimension {}, encoder uses {}",
                    c.label.len(),
                    encoder.dim()
                )));
            }
        }
        if feature_map.ncols() != dim {
            return Err(Error::InvalidInput(format!(
                "feature map has {} columns, latent dimension is {dim}",
                feature_map.ncols()
            )));
        }
        if encoder.image_len() != dim {
            return Err(Error::InvalidInput(format!(
                "encoder accepts images of length {}, latent dimension is {dim}",
                encoder.image_len()
            )));
        }
        Ok(Self {
            shape,
            components,
            conditioning,
            feature_map,
            encoder,
            layer: "tweedie-linear".into(),
        })
    }

    /// Two-dimensional cat/dog mixture used throughout the tests and examples.
    ///
    /// "cat" components sit at `x₀ ≈ −1`, "dog" components at `x₀ ≈ +1`,
    /// each split along the second axis. The image encoder maps the cat
    /// side towards the `cat` token and the dog side towards `dog`.
    pub fn toy_2d(seed: u64) -> Self {
        let enc_dim = 8;
        let base = VocabularyEncoder::new(enc_dim, seed, 2);
        let cat = base.token_vector("cat");
        let dog = base.token_vector("dog");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(11));
        let wobble = Array1::from_shape_fn(enc_dim, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.2 * z
        });
        let mut projection = Array2::zeros((enc_dim, 2));
        projection.column_mut(0).assign(&((&dog - &cat) * 0.5));
        projection.column_mut(1).assign(&wobble);
        let encoder = base
            .with_projection(projection)
            .and_then(|e| e.with_bias((&dog + &cat) * 0.5))
            .expect("toy encoder dimensions agree");
        let comp = |mx: f64, my: f64, label: &Array1<f64>| MixtureComponent {
            weight: 0.25,
            mean: Array1::from(vec![mx, my]),
            variance: Array1::from(vec![0.04, 0.09]),
            label: label.clone(),
        };
        let components = vec![
            comp(-1.0, 0.5, &cat),
            comp(-1.0, -0.5, &cat),
            comp(1.0, 0.5, &dog),
            comp(1.0, -0.5, &dog),
        ];
        // low gain keeps one guided step small next to the data scale
        let feature_map =
            Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap() * TOY_FEATURE_GAIN;
        Self::new(vec![2], components, 8.0, feature_map, encoder).expect("toy mixture is valid")
    }

    /// Synthetic mixture over images of `shape`, one component per concept.
    ///
    /// Means are seeded random patterns in `[-0.6, 0.6]` with per-pixel
    /// variance `variance`; the image encoder is aligned so that images close
    /// to a concept's mean embed close to that concept's token.
    pub fn preset(shape: &[usize], concepts: &[&str], variance: f64, seed: u64) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::InvalidInput("preset needs at least one concept".into()));
        }
        let dim: usize = shape.iter().product();
        let enc_dim = 32;
        let base = VocabularyEncoder::new(enc_dim, seed, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
        let means: Vec<Array1<f64>> = concepts
            .iter()
            .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-0.6..0.6)))
            .collect();
        let centre = means.iter().fold(Array1::<f64>::zeros(dim), |acc, m| acc + m) / means.len() as f64;
        let mut projection = base.projection() * 0.1;
        let mut bias = Array1::zeros(enc_dim);
        for (concept, mean) in concepts.iter().zip(&means) {
            let label = base.token_vector(concept);
            let dir = mean - &centre;
            let n2 = dir.dot(&dir);
            if n2 > 0.0 {
                let row = &dir / n2;
                for i in 0..enc_dim {
                    projection.row_mut(i).scaled_add(label[i], &row);
                }
            }
            bias = bias + &label / concepts.len() as f64;
        }
        let encoder = base.with_projection(projection)?.with_bias(bias)?;
        let components = concepts
            .iter()
            .zip(means)
            .map(|(concept, mean)| MixtureComponent {
                weight: 1.0 / concepts.len() as f64,
                mean,
                variance: Array1::from_elem(dim, variance),
                label: encoder.token_vector(concept),
            })
            .collect();
        let rows = dim.min(16);
        let scale = 1.0 / (dim as f64).sqrt();
        let feature_map = Array2::from_shape_fn((rows, dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self::new(shape.to_vec(), components, 8.0, feature_map, encoder)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn vocabulary(&self) -> &VocabularyEncoder {
        &self.encoder
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn into_bundle(self) -> BackendBundle {
        let shared = Arc::new(self);
        BackendBundle {
            predictor: shared.clone(),
            features: shared.clone(),
            encoder: shared.clone(),
            codec: shared,
        }
    }

    fn flat(&self, x: &Latent) -> Result<Array1<f64>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(x.iter().copied().collect())
    }

    fn unflat(&self, v: Array1<f64>) -> Latent {
        Latent::from_shape_vec(IxDyn(&self.shape), v.to_vec()).expect("length matches shape")
    }

    /// Conditional mixture log-weights for a prompt.
    fn log_weights(&self, y: &PromptEmbedding) -> Result<Vec<f64>> {
        if !y.is_null() && y.vector.len() != self.encoder.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.encoder.dim()],
                got: vec![y.vector.len()],
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                let tilt = if y.is_null() {
                    0.0
                } else {
                    self.conditioning * c.label.dot(&y.vector)
                };
                c.weight.ln() + tilt
            })
            .collect())
    }

    fn posterior(&self, x: &Array1<f64>, alpha: f64, y: &PromptEmbedding) -> Result<Posterior> {
        let sa = alpha.sqrt();
        let log_w = self.log_weights(y)?;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(self.components.len());
        let mut inv_cov = Vec::with_capacity(self.components.len());
        for (c, lw) in self.components.iter().zip(log_w) {
            let cov = c.variance.mapv(|v| alpha * v + (1.0 - alpha));
            let inv = cov.mapv(|c| 1.0 / c);
            let diff = x - &(&c.mean * sa);
            let maha: f64 = diff.iter().zip(inv.iter()).map(|(d, i)| d * d * i).sum();
            let logdet: f64 = cov.iter().map(|c| c.ln()).sum();
            logs.push(lw - 0.5 * (maha + logdet));
            scores.push(-(&diff * &inv));
            inv_cov.push(inv);
        }
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);
        let mut mean_score = Array1::zeros(x.len());
        for (r, s) in resp.iter().zip(&scores) {
            mean_score.scaled_add(*r, s);
        }
        Ok(Posterior {
            resp,
            scores,
            inv_cov,
            mean_score,
        })
    }

    /// Exact `E[x₀ | x_t]` from the per-component Gaussian posteriors.
    pub fn posterior_mean(&self, x: &Latent, alpha: f64, y: &PromptEmbedding) -> Result<Latent> {
        let xf = self.flat(x)?;
        let post = self.posterior(&xf, alpha, y)?;
        let sa = alpha.sqrt();
        let mut out = Array1::zeros(xf.len());
        for ((c, r), inv) in self.components.iter().zip(&post.resp).zip(&post.inv_cov) {
            let diff = &xf - &(&c.mean * sa);
            let m = &c.mean + &(&c.variance * &inv.mapv(|i| i * sa) * &diff);
            out.scaled_add(*r, &m);
        }
        Ok(self.unflat(out))
    }

    /// Hessian of `log p_t` applied to `v`.
    fn hessian_vec(post: &Posterior, v: &Array1<f64>) -> Array1<f64> {
        let mut out = -(&post.mean_score * post.mean_score.dot(v));
        for ((r, s), inv) in post.resp.iter().zip(&post.scores).zip(&post.inv_cov) {
            out.scaled_add(-r, &(v * inv));
            out.scaled_add(r * s.dot(v), s);
        }
        out
    }

    fn eps_flat(&self, x: &Array1<f64>, alpha: f64, y: &PromptEmbedding) -> Result<(Array1<f64>, Posterior)> {
        let post = self.posterior(x, alpha, y)?;
        let eps = &post.mean_score * (-(1.0 - alpha).sqrt());
        Ok((eps, post))
    }

    fn tweedie_flat(&self, x: &Array1<f64>, alpha: f64, y: &PromptEmbedding) -> Result<(Array1<f64>, Posterior)> {
        let (eps, post) = self.eps_flat(x, alpha, y)?;
        Ok(((x - &(eps * (1.0 - alpha).sqrt())) / alpha.sqrt(), post))
    }

    /// Plain-text `backend.*` block.
    pub fn to_kv(&self) -> String {
        let mut lines: Vec<(String, String)> = vec![
            ("backend.kind".into(), "gmm".into()),
            ("backend.shape".into(), kv::join(&self.shape)),
            ("backend.conditioning".into(), self.conditioning.to_string()),
            ("backend.components".into(), self.components.len().to_string()),
        ];
        for (k, c) in self.components.iter().enumerate() {
            lines.push((format!("backend.component.{k}.weight"), c.weight.to_string()));
            lines.push((
                format!("backend.component.{k}.mean"),
                kv::join(c.mean.as_slice().unwrap()),
            ));
            lines.push((
                format!("backend.component.{k}.variance"),
                kv::join(c.variance.as_slice().unwrap()),
            ));
            lines.push((
                format!("backend.component.{k}.label"),
                kv::join(c.label.as_slice().unwrap()),
            ));
        }
        lines.push(("backend.feature_rows".into(), self.feature_map.nrows().to_string()));
        lines.push((
            "backend.feature_map".into(),
            kv::join(&self.feature_map.iter().copied().collect::<Vec<_>>()),
        ));
        lines.push(("backend.encoder.dim".into(), self.encoder.dim().to_string()));
        lines.push(("backend.encoder.seed".into(), self.encoder.seed().to_string()));
        lines.push((
            "backend.encoder.projection".into(),
            kv::join(&self.encoder.projection().iter().copied().collect::<Vec<_>>()),
        ));
        lines.push((
            "backend.encoder.bias".into(),
            kv::join(self.encoder.bias().as_slice().unwrap()),
        ));
        for (token, v) in self.encoder.explicit_tokens() {
            lines.push((
                format!("backend.encoder.token.{token}"),
                kv::join(v.as_slice().unwrap()),
            ));
        }
        kv::render(lines.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let list = |key: &str| -> Result<Vec<f64>> {
            map.parse_list::<f64>(key)?
                .ok_or_else(|| Error::Config(format!("missing field `{key}`")))
        };
        let shape: Vec<usize> = map
            .parse_list("backend.shape")?
            .ok_or_else(|| Error::Config("missing field `backend.shape`".into()))?;
        let dim: usize = shape.iter().product();
        let enc_dim: usize = map.require("backend.encoder.dim")?;
        let mut encoder = VocabularyEncoder::new(enc_dim, map.parse_or("backend.encoder.seed", 0)?, dim);
        if map.contains("backend.encoder.projection") {
            let p = list("backend.encoder.projection")?;
            let p = Array2::from_shape_vec((enc_dim, dim), p)
                .map_err(|e| Error::Config(format!("backend.encoder.projection: {e}")))?;
            encoder = encoder.with_projection(p)?;
        }
        if map.contains("backend.encoder.bias") {
            encoder = encoder.with_bias(Array1::from(list("backend.encoder.bias")?))?;
        }
        let token_keys: Vec<String> = map
            .keys()
            .filter(|k| k.starts_with("backend.encoder.token."))
            .map(str::to_string)
            .collect();
        for key in token_keys {
            let token = key.trim_start_matches("backend.encoder.token.").to_string();
            encoder = encoder.with_token(&token, Array1::from(list(&key)?))?;
        }
        let count: usize = map.require("backend.components")?;
        let components = (0..count)
            .map(|k| {
                Ok(MixtureComponent {
                    weight: map.require(&format!("backend.component.{k}.weight"))?,
                    mean: Array1::from(list(&format!("backend.component.{k}.mean"))?),
                    variance: Array1::from(list(&format!("backend.component.{k}.variance"))?),
                    label: Array1::from(list(&format!("backend.component.{k}.label"))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: usize = map.require("backend.feature_rows")?;
        let feature_map = Array2::from_shape_vec((rows, dim), list("backend.feature_map")?)
            .map_err(|e| Error::Config(format!("backend.feature_map: {e}")))?;
        Self::new(
            shape,
            components,
            map.require("backend.conditioning")?,
            feature_map,
            encoder,
        )
    }
}

impl NoisePredictor for AnalyticGmmBackend {
    fn epsilon(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> Result<Latent> {
        let (eps, _) = self.eps_flat(&self.flat(x)?, t.alpha, y)?;
        Ok(self.unflat(eps))
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn epsilon_vjp(&self, x: &Latent, t: Timestep, y: &PromptEmbedding, v: &Latent) -> Result<Latent> {
        let post = self.posterior(&self.flat(x)?, t.alpha, y)?;
        let hv = Self::hessian_vec(&post, &self.flat(v)?);
        Ok(self.unflat(hv * (-(1.0 - t.alpha).sqrt())))
    }
}

impl FeatureExtractor for AnalyticGmmBackend {
    fn layer_selector(&self) -> &str {
        &self.layer
    }

    fn features(&self, x: &Latent, t: Timestep, y: &PromptEmbedding) -> Result<Latent> {
        let (x0, _) = self.tweedie_flat(&self.flat(x)?, t.alpha, y)?;
        let m = self.feature_map.dot(&x0);
        Ok(Latent::from_shape_vec(IxDyn(&[m.len()]), m.to_vec()).unwrap())
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn features_vjp(&self, x: &Latent, t: Timestep, y: &PromptEmbedding, v: &Latent) -> Result<Latent> {
        if v.len() != self.feature_map.nrows() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.feature_map.nrows()],
                got: v.shape().to_vec(),
            });
        }
        let xf = self.flat(x)?;
        let post = self.posterior(&xf, t.alpha, y)?;
        let vf: Array1<f64> = v.iter().copied().collect();
        let u = self.feature_map.t().dot(&vf);
        // x̂₀ = (x − √(1−α) ε)/√α and ∂ε/∂x = −√(1−α) H, so ∂x̂₀/∂x = (I + (1−α) H)/√α.
        let hu = Self::hessian_vec(&post, &u);
        let g = (&u + &(hu * (1.0 - t.alpha))) / t.alpha.sqrt();
        Ok(self.unflat(g))
    }
}

impl JointEncoder for AnalyticGmmBackend {
    fn embed_prompt(&self, prompt: &str) -> Result<PromptEmbedding> {
        self.encoder.embed_prompt(prompt)
    }

    fn null_prompt(&self) -> PromptEmbedding {
        self.encoder.null_prompt()
    }

    fn encode_image(&self, image: &Latent) -> Result<Array1<f64>> {
        self.encoder.encode_image(image)
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn encode_image_vjp(&self, image: &Latent, v: &Array1<f64>) -> Result<Latent> {
        self.encoder.encode_image_vjp(image, v)
    }
}

impl LatentCodec for AnalyticGmmBackend {
    fn encode(&self, image: &Latent) -> Result<Latent> {
        self.flat(image)?;
        IdentityCodec.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<Latent> {
        IdentityCodec.decode(latent)
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn decode_vjp(&self, latent: &Latent, v: &Latent) -> Result<Latent> {
        IdentityCodec.decode_vjp(latent, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::DiffusionSchedule;
    use ndarray::ArrayD;

    fn ts(alpha: f64) -> Timestep {
        Timestep {
            position: 1,
            index: 0,
            alpha,
        }
    }

    fn single_gaussian_1d(mu: f64, var: f64) -> AnalyticGmmBackend {
        let enc = VocabularyEncoder::new(4, 0, 1);
        let label = enc.token_vector("x");
        AnalyticGmmBackend::new(
            vec![1],
            vec![MixtureComponent {
                weight: 1.0,
                mean: Array1::from(vec![mu]),
                variance: Array1::from(vec![var]),
                label,
            }],
            1.0,
            Array2::from_elem((1, 1), 1.0),
            enc,
        )
        .unwrap()
    }

    // Brute-force E[x₀ | x_t] by quadrature over x₀ on a fine grid.
    fn quadrature_posterior_mean(mus: &[f64], vars: &[f64], ws: &[f64], alpha: f64, xt: f64) -> f64 {
        let (lo, hi, n) = (-12.0, 12.0, 200_001);
        let h = (hi - lo) / (n - 1) as f64;
        let noise = 1.0 - alpha;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let x0 = lo + i as f64 * h;
            let prior: f64 = mus
                .iter()
                .zip(vars)
                .zip(ws)
                .map(|((m, v), w)| w * (-(x0 - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
                .sum();
            let like = (-(xt - alpha.sqrt() * x0).powi(2) / (2.0 * noise)).exp();
            num += x0 * prior * like;
            den += prior * like;
        }
        num / den
    }

    #[test]
    fn single_gaussian_posterior_is_affine_and_matches_quadrature() {
        let (mu, var) = (0.7, 0.3);
        let backend = single_gaussian_1d(mu, var);
        let y = backend.null_prompt();
        for alpha in [0.9, 0.5, 0.1] {
            let mut prev_slope: Option<f64> = None;
            for (i, xt) in [-1.5, 0.0, 1.5].iter().enumerate() {
                let x = ArrayD::from_elem(IxDyn(&[1]), *xt);
                let pm = backend.posterior_mean(&x, alpha, &y).unwrap()[[0]];
                let oracle = quadrature_posterior_mean(&[mu], &[var], &[1.0], alpha, *xt);
                assert!((pm - oracle).abs() < 1e-6, "alpha {alpha} x {xt}: {pm} vs {oracle}");
                let closed = mu + alpha.sqrt() * var / (alpha * var + 1.0 - alpha) * (xt - alpha.sqrt() * mu);
                assert!((pm - closed).abs() < 1e-12);
                if i > 0 {
                    let slope = (pm - prev_slope.unwrap()) / 1.5;
                    let expect = alpha.sqrt() * var / (alpha * var + 1.0 - alpha);
                    assert!((slope - expect).abs() < 1e-10);
                }
                prev_slope = Some(pm);
                let eps = backend.epsilon(&x, ts(alpha), &y).unwrap()[[0]];
                let from_mean = (xt - alpha.sqrt() * pm) / (1.0 - alpha).sqrt();
                assert!((eps - from_mean).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixture_posterior_matches_quadrature() {
        let enc = VocabularyEncoder::new(4, 0, 1);
        let comps = vec![
            MixtureComponent {
                weight: 0.3,
                mean: Array1::from(vec![-1.0]),
                variance: Array1::from(vec![0.1]),
                label: enc.token_vector("a"),
            },
            MixtureComponent {
                weight: 0.7,
                mean: Array1::from(vec![1.5]),
                variance: Array1::from(vec![0.4]),
                label: enc.token_vector("b"),
            },
        ];
        let backend = AnalyticGmmBackend::new(vec![1], comps, 1.0, Array2::from_elem((1, 1), 1.0), enc).unwrap();
        let y = backend.null_prompt();
        for alpha in [0.95, 0.6, 0.2] {
            for xt in [-2.0, -0.3, 0.4, 2.2] {
                let x = ArrayD::from_elem(IxDyn(&[1]), xt);
                let pm = backend.posterior_mean(&x, alpha, &y).unwrap()[[0]];
                let oracle = quadrature_posterior_mean(&[-1.0, 1.5], &[0.1, 0.4], &[0.3, 0.7], alpha, xt);
                assert!((pm - oracle).abs() < 1e-6, "{pm} vs {oracle}");
            }
        }
    }

    #[test]
    fn epsilon_at_clean_boundary_vanishes() {
        let backend = AnalyticGmmBackend::toy_2d(1);
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2, 0.1]).unwrap();
        let y = backend.embed_prompt("a cat").unwrap();
        let eps = backend.epsilon(&x, ts(1.0), &y).unwrap();
        assert!(eps.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vjps_match_finite_differences() {
        let backend = AnalyticGmmBackend::toy_2d(3);
        let schedule = DiffusionSchedule::default_with_steps(20).unwrap();
        let y = backend.embed_prompt("a dog").unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.4, -0.7]).unwrap();
        let v2 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, 1.1]).unwrap();
        let v3 = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -0.2, 0.9]).unwrap();
        for pos in [1, 5, 12, 20] {
            let t = schedule.timestep(pos).unwrap();
            let ge = backend.epsilon_vjp(&x, t, &y, &v2).unwrap();
            let gf = backend.features_vjp(&x, t, &y, &v3).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[[i]] += h;
                let mut xm = x.clone();
                xm[[i]] -= h;
                let de = (crate::tensor::dot(&backend.epsilon(&xp, t, &y).unwrap(), &v2)
                    - crate::tensor::dot(&backend.epsilon(&xm, t, &y).unwrap(), &v2))
                    / (2.0 * h);
                let df = (crate::tensor::dot(&backend.features(&xp, t, &y).unwrap(), &v3)
                    - crate::tensor::dot(&backend.features(&xm, t, &y).unwrap(), &v3))
                    / (2.0 * h);
                assert!(
                    (de - ge[[i]]).abs() < 1e-6 * (1.0 + de.abs()),
                    "eps pos {pos}: {de} vs {}",
                    ge[[i]]
                );
                assert!(
                    (df - gf[[i]]).abs() < 1e-5 * (1.0 + df.abs()),
                    "feat pos {pos}: {df} vs {}",
                    gf[[i]]
                );
            }
        }
    }

    #[test]
    fn prompts_tilt_the_mixture() {
        let backend = AnalyticGmmBackend::toy_2d(0);
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap();
        let cat = backend.embed_prompt("a cat").unwrap();
        let dog = backend.embed_prompt("a dog").unwrap();
        let m_cat = backend.posterior_mean(&x, 0.3, &cat).unwrap();
        let m_dog = backend.posterior_mean(&x, 0.3, &dog).unwrap();
        assert!(m_cat[[0]] < 0.0 && m_dog[[0]] > 0.0, "{m_cat} {m_dog}");
    }

    #[test]
    fn kv_round_trip() {
        let backend = AnalyticGmmBackend::toy_2d(9);
        let map = KvMap::parse(&backend.to_kv(), "gmm").unwrap();
        let back = AnalyticGmmBackend::from_kv(&map).unwrap();
        assert_eq!(back.components(), backend.components());
        assert_eq!(back.to_kv(), backend.to_kv());
        let preset = AnalyticGmmBackend::preset(&[4, 4, 3], &["cat", "dog"], 0.05, 2).unwrap();
        let back = AnalyticGmmBackend::from_kv(&KvMap::parse(&preset.to_kv(), "p").unwrap()).unwrap();
        assert_eq!(back.to_kv(), preset.to_kv());
    }
}
