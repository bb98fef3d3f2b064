//! Edit configuration: a flat `key=value` file with section prefixes.
//!
//! ```text
//! schedule.grid_steps=50
//! guidance.lambda2=1.0
//! coherence.lambda4=0.5
//! backend.kind=gmm
//! backend.concepts=cat,dog
//! io.seed=7
//! ```

use std::path::{Path, PathBuf};

use crate::backends::{
    AdapterRegistry, AnalyticGmmBackend, BackendBundle, ConstantEpsilonBackend, PretrainedAdapterSpec,
};
use crate::ddim::CachePolicy;
use crate::error::{Error, Result};
use crate::guidance::{DistanceKind, GuidanceConfig};
use crate::kv::KvMap;
use crate::metrics::PatchProjectionEncoder;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Latent;

pub const SECTIONS: &[&str] = &["schedule", "guidance", "coherence", "io", "backend", "cache", "metrics"];

const SCHEDULE_KEYS: &[&str] = &[
    "family",
    "total_steps",
    "grid_steps",
    "grid",
    "beta_start",
    "beta_end",
    "scaled",
    "cosine_offset",
    "alphas",
];
const COHERENCE_KEYS: &[&str] = &["enabled", "lambda3", "lambda4"];
const IO_KEYS: &[&str] = &["seed", "trace_timing", "distance"];
const CACHE_KEYS: &[&str] = &["policy"];
const METRICS_KEYS: &[&str] = &["patch", "dim", "seed"];
const BACKEND_KEYS: &[&str] = &[
    "kind",
    "file",
    "concepts",
    "variance",
    "seed",
    "epsilon",
    "checkpoint",
    "device",
    "layer_selector",
    "latent_shape",
];

/// Which backend an edit runs on.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    /// Gaussian mixture over images, built for the input resolution, or read from a file.
    Gmm {
        file: Option<PathBuf>,
        concepts: Vec<String>,
        variance: f64,
        seed: u64,
    },
    /// `ε ≡ epsilon` everywhere.
    Constant {
        epsilon: f64,
    },
    Pretrained(PretrainedAdapterSpec),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Gmm {
            file: None,
            concepts: vec!["cat".into(), "dog".into()],
            variance: 0.05,
            seed: 0,
        }
    }
}

impl BackendSpec {
    fn from_kv(map: &KvMap, base: &Path) -> Result<Self> {
        let kind: String = map.parse_or("backend.kind", "gmm".to_string())?;
        match kind.as_str() {
            "gmm" => Ok(Self::Gmm {
                file: map.get("backend.file").map(|f| base.join(f)),
                concepts: map
                    .parse_list("backend.concepts")?
                    .unwrap_or_else(|| vec!["cat".into(), "dog".into()]),
                variance: map.parse_or("backend.variance", 0.05)?,
                seed: map.parse_or("backend.seed", 0)?,
            }),
            "constant" => Ok(Self::Constant {
                epsilon: map.parse_or("backend.epsilon", 0.0)?,
            }),
            "pretrained" => Ok(Self::Pretrained(PretrainedAdapterSpec::from_kv(map)?)),
            other => Err(Error::Config(format!(
                "backend.kind must be gmm, constant or pretrained, got `{other}`"
            ))),
        }
    }

    /// Instantiate for latents of `shape`.
    pub fn build(&self, shape: &[usize], registry: &AdapterRegistry) -> Result<BackendBundle> {
        match self {
            BackendSpec::Gmm { file: Some(path), .. } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let gmm = AnalyticGmmBackend::from_kv(&KvMap::parse(&text, path.display().to_string())?)?;
                if gmm.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: gmm.shape().to_vec(),
                        got: shape.to_vec(),
                    });
                }
                Ok(gmm.into_bundle())
            }
            BackendSpec::Gmm {
                file: None,
                concepts,
                variance,
                seed,
            } => {
                let names: Vec<&str> = concepts.iter().map(String::as_str).collect();
                Ok(AnalyticGmmBackend::preset(shape, &names, *variance, *seed)?.into_bundle())
            }
            BackendSpec::Constant { epsilon } => {
                Ok(ConstantEpsilonBackend::new(Latent::from_elem(shape, *epsilon)).into_bundle())
            }
            BackendSpec::Pretrained(spec) => registry.load(spec),
        }
    }

    pub fn is_pretrained(&self) -> bool {
        matches!(self, BackendSpec::Pretrained(_))
    }
}

/// Everything an edit needs besides the task itself.
#[derive(Debug, Clone)]
pub struct EditConfig {
    pub schedule: DiffusionSchedule,
    pub guidance: GuidanceConfig,
    /// Run the interleaved sampler with coherence guidance.
    pub coherence: bool,
    pub backend: BackendSpec,
    pub cache_policy: CachePolicy,
    pub distance: DistanceKind,
    pub trace_timing: bool,
    pub seed: u64,
    pub structure: PatchProjectionEncoder,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            schedule: DiffusionSchedule::default_with_steps(crate::schedule::DEFAULT_GRID_STEPS)
                .expect("default schedule is valid"),
            guidance: GuidanceConfig::default(),
            coherence: false,
            backend: BackendSpec::default(),
            cache_policy: CachePolicy::Eager,
            distance: DistanceKind::Triplet,
            trace_timing: false,
            seed: 0,
            structure: PatchProjectionEncoder::default(),
        }
    }
}

impl EditConfig {
    /// Build from a parsed map. Relative backend files resolve against `base`.
    pub fn from_kv(map: &KvMap, base: &Path) -> Result<Self> {
        map.reject_unknown_sections(SECTIONS)?;
        map.reject_unknown("schedule.", SCHEDULE_KEYS)?;
        map.reject_unknown("coherence.", COHERENCE_KEYS)?;
        map.reject_unknown("io.", IO_KEYS)?;
        map.reject_unknown("cache.", CACHE_KEYS)?;
        map.reject_unknown("backend.", BACKEND_KEYS)?;
        map.reject_unknown("metrics.", METRICS_KEYS)?;
        if map.contains("schedule.grid") && map.contains("schedule.grid_steps") {
            return Err(Error::Config(
                "give either schedule.grid or schedule.grid_steps, not both".into(),
            ));
        }
        let backend = BackendSpec::from_kv(map, base)?;
        let mut guidance = if backend.is_pretrained() {
            GuidanceConfig::pretrained()
        } else {
            GuidanceConfig::default()
        };
        guidance.apply_kv(map)?;
        let cache_policy = match map.get("cache.policy").unwrap_or("eager") {
            "eager" => CachePolicy::Eager,
            "recompute" => CachePolicy::Recompute,
            other => {
                return Err(Error::Config(format!(
                    "cache.policy must be eager or recompute, got `{other}`"
                )))
            }
        };
        let distance = match map.get("io.distance").unwrap_or("triplet") {
            "triplet" => DistanceKind::Triplet,
            "naive" => DistanceKind::Naive,
            other => {
                return Err(Error::Config(format!(
                    "io.distance must be triplet or naive, got `{other}`"
                )))
            }
        };
        let defaults = PatchProjectionEncoder::default();
        Ok(Self {
            schedule: DiffusionSchedule::from_kv(map)?,
            guidance,
            coherence: map.parse_or("coherence.enabled", false)?,
            backend,
            cache_policy,
            distance,
            trace_timing: map.parse_or("io.trace_timing", false)?,
            seed: map.parse_or("io.seed", 0)?,
            structure: PatchProjectionEncoder::new(
                map.parse_or("metrics.patch", defaults.patch())?,
                map.parse_or("metrics.dim", 16)?,
                map.parse_or("metrics.seed", 0)?,
            )?,
        })
    }

    /// Read `path` (if any), apply `overrides` on top, and build.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (mut map, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (KvMap::parse(&text, p.display().to_string())?, base)
            }
            None => (KvMap::new("command line"), PathBuf::new()),
        };
        for (k, v) in overrides {
            map.set(k.clone(), v.clone());
        }
        Self::from_kv(&map, &base)
    }
}
