//! Contract for binding pretrained latent-diffusion checkpoints.
//!
//! No weights ship with this crate. A runtime that can evaluate a
//! pretrained noise predictor registers a factory for a locator scheme
//! (for example `sd14://`) and receives the parsed adapter spec. The
//! factory must return a bundle whose predictor, feature extractor, codec
//! decode and image encoder all provide exact vector-Jacobian products.

use std::collections::BTreeMap;

use super::BackendBundle;
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

/// Mid-depth decoder block of a UNet-style noise predictor.
pub const DEFAULT_LAYER_SELECTOR: &str = "decoder.mid";

/// What a pretrained adapter is told about its checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedAdapterSpec {
    /// `scheme://location` of the checkpoint.
    pub checkpoint: String,
    pub device: String,
    pub layer_selector: String,
    pub latent_shape: Vec<usize>,
}

impl PretrainedAdapterSpec {
    pub fn scheme(&self) -> Option<&str> {
        self.checkpoint.split_once("://").map(|(s, _)| s)
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let checkpoint: String = map.require("backend.checkpoint")?;
        let latent_shape = map
            .parse_list("backend.latent_shape")?
            .ok_or_else(|| Error::Config("pretrained backend needs backend.latent_shape".into()))?;
        Ok(Self {
            checkpoint,
            device: map.parse_or("backend.device", "cpu".to_string())?,
            layer_selector: map.parse_or("backend.layer_selector", DEFAULT_LAYER_SELECTOR.to_string())?,
            latent_shape,
        })
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("backend.kind", "pretrained".to_string()),
            ("backend.checkpoint", self.checkpoint.clone()),
            ("backend.device", self.device.clone()),
            ("backend.layer_selector", self.layer_selector.clone()),
            ("backend.latent_shape", kv::join(&self.latent_shape)),
        ])
    }
}

type Factory = Box<dyn Fn(&PretrainedAdapterSpec) -> Result<BackendBundle> + Send + Sync>;

/// Maps checkpoint schemes to adapter factories.
#[derive(Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, Factory>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, scheme: &str, factory: F)
    where
        F: Fn(&PretrainedAdapterSpec) -> Result<BackendBundle> + Send + Sync + 'static,
    {
        self.factories.insert(scheme.to_string(), Box::new(factory));
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn load(&self, spec: &PretrainedAdapterSpec) -> Result<BackendBundle> {
        let scheme = spec.scheme().ok_or_else(|| {
            Error::Config(format!(
                "checkpoint locator `{}` has no scheme (expected scheme://location)",
                spec.checkpoint
            ))
        })?;
        let factory = self
            .factories
            .get(scheme)
            .ok_or_else(|| Error::Config(format!("no pretrained adapter registered for scheme `{scheme}`")))?;
        let bundle = factory(spec)?;
        if !bundle.supports_differentiation() {
            return Err(Error::Backend(format!(
                "adapter for `{scheme}` does not provide exact gradients"
            )));
        }
        Ok(bundle)
    }
}
