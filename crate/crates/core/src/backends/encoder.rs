use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{JointEncoder, PromptEmbedding};
use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Lowercase whitespace tokenizer; strips surrounding ASCII punctuation.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Deterministic finite-vocabulary joint encoder.
///
/// Tokens map to fixed unit vectors: explicitly assigned ones, or a seeded
/// hash of the token text otherwise. A prompt embeds to the normalized sum
/// of its token vectors. Images embed through a fixed affine projection of
/// the flattened array.
#[derive(Debug, Clone)]
pub struct VocabularyEncoder {
    dim: usize,
    seed: u64,
    explicit: BTreeMap<String, Array1<f64>>,
    projection: Array2<f64>,
    bias: Array1<f64>,
}

impl VocabularyEncoder {
    /// `image_len` is the flattened length of the images this encoder accepts.
    pub fn new(dim: usize, seed: u64, image_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a6e_5eed);
        let scale = 1.0 / (image_len.max(1) as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, image_len), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self {
            dim,
            seed,
            explicit: BTreeMap::new(),
            projection,
            bias: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_len(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// Pin a token to a given direction (normalized on insert).
    pub fn with_token(mut self, token: &str, vector: Array1<f64>) -> Result<Self> {
        if vector.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "token vector has dimension {}, encoder uses {}",
                vector.len(),
                self.dim
            )));
        }
        let norm = vector.dot(&vector).sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!("zero vector for token `{token}`")));
        }
        self.explicit.insert(token.to_lowercase(), vector / norm);
        Ok(self)
    }

    pub fn explicit_tokens(&self) -> impl Iterator<Item = (&str, &Array1<f64>)> {
        self.explicit.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Replace the image projection (`dim × image_len`).
    pub fn with_projection(mut self, projection: Array2<f64>) -> Result<Self> {
        if projection.nrows() != self.dim {
            return Err(Error::InvalidInput(format!(
                "projection has {} rows, encoder dimension is {}",
                projection.nrows(),
                self.dim
            )));
        }
        self.projection = projection;
        Ok(self)
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Offset added to every image embedding.
    pub fn with_bias(mut self, bias: Array1<f64>) -> Result<Self> {
        if bias.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "bias has dimension {}, encoder uses {}",
                bias.len(),
                self.dim
            )));
        }
        self.bias = bias;
        Ok(self)
    }

    /// Unit vector for a single token.
    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let token = token.to_lowercase();
        if let Some(v) = self.explicit.get(&token) {
            return v.clone();
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(bytes);
        let v: Array1<f64> = Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng));
        let norm = v.dot(&v).sqrt();
        v / norm
    }

    fn flatten(&self, image: &Latent) -> Result<Array1<f64>> {
        if image.len() != self.image_len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.image_len()],
                got: image.shape().to_vec(),
            });
        }
        Ok(image.iter().copied().collect())
    }
}

impl JointEncoder for VocabularyEncoder {
    fn embed_prompt(&self, prompt: &str) -> Result<PromptEmbedding> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let token_embeddings: Vec<Array1<f64>> = tokens.iter().map(|t| self.token_vector(t)).collect();
        let mut vector = Array1::zeros(self.dim);
        for v in &token_embeddings {
            vector += v;
        }
        let norm = vector.dot(&vector).sqrt();
        if norm > 0.0 {
            vector /= norm;
        }
        Ok(PromptEmbedding {
            prompt_text: prompt.to_string(),
            tokens,
            token_embeddings,
            vector,
        })
    }

    fn null_prompt(&self) -> PromptEmbedding {
        PromptEmbedding::null(self.dim)
    }

    fn encode_image(&self, image: &Latent) -> Result<Array1<f64>> {
        Ok(self.projection.dot(&self.flatten(image)?) + &self.bias)
    }

    fn supports_differentiation(&self) -> bool {
        true
    }

    fn encode_image_vjp(&self, image: &Latent, v: &Array1<f64>) -> Result<Latent> {
        self.flatten(image)?;
        let g = self.projection.t().dot(v);
        Latent::from_shape_vec(image.raw_dim(), g.to_vec()).map_err(|e| Error::Backend(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::cosine_similarity;

    #[test]
    fn tokenizer_strips_case_and_punctuation() {
        assert_eq!(tokenize("A Cat, sitting!"), vec!["a", "cat", "sitting"]);
        assert!(tokenize("  ,, ").is_empty());
    }

    #[test]
    fn self_similarity_is_one() {
        let enc = VocabularyEncoder::new(16, 5, 4);
        for p in ["cat", "a dog on grass", "oil painting of a horse"] {
            let v = enc.encode_text(p).unwrap();
            assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hashed_tokens_are_deterministic_and_seeded() {
        let a = VocabularyEncoder::new(16, 5, 4);
        let b = VocabularyEncoder::new(16, 5, 4);
        let c = VocabularyEncoder::new(16, 6, 4);
        assert_eq!(a.token_vector("zebra"), b.token_vector("zebra"));
        assert_ne!(a.token_vector("zebra"), c.token_vector("zebra"));
        assert_eq!(a.token_vector("Zebra"), a.token_vector("zebra"));
    }

    #[test]
    fn embedding_tracks_tokens() {
        let enc = VocabularyEncoder::new(8, 1, 2);
        let e = enc.embed_prompt("a kitten").unwrap();
        assert_eq!(e.tokens.len(), e.token_embeddings.len());
        assert!(enc.embed_prompt("   ").is_err());
        assert!(enc.null_prompt().is_null());
    }
}
