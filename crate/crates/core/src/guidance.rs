//! Representation guidance for the reverse chain.
//!
//! The guided reverse update is
//! `x_{t−1} = √(α_{t−1}/α_t)·x_t − √(1−α_t)·γ_t·ε(x_t,t,y_tgt) − ∇L(x_t)`,
//! which equals the plain reverse step when `L ≡ 0`. `L` is either the naive
//! distance `−Sim(e, txt_tgt) + β_f·d_src` or the triplet objective
//!
//! ```text
//! L = −λ₁·min(0, Sim(e, txt_tgt) − Sim(e, txt_src) − β_p)
//!     + λ₂·max(0, β_f·d_src − d_prev)
//! ```
//!
//! with `e = f_img(decode(x̂₀(x_t)))`, `d_src = ‖M(x_t,t,y_tgt) − M(x_t^src,t,y_src)‖_F`
//! and `d_prev = ‖M(x_t,t,y_tgt) − M(x_{t+1},t+1,y_tgt)‖_F`. The previous target
//! features are a constant of the step.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;

use crate::backends::{
    cosine_similarity, cosine_similarity_grad, gradient_of, BackendBundle, ClassifierFree, FiniteDifference,
    GradientMode, JointEncoder, NoisePredictor, Objective, PromptEmbedding,
};
use crate::ddim::{checked_eps, run_inversion, CachePolicy, TrajectoryCache};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{self, Latent};

/// What to do with `d_prev` at the first reverse step, where no previous target exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstStepPolicy {
    /// Drop the feature hinge at `t = T`.
    #[default]
    SkipPrevTerm,
    /// Use the features of the step's own input as the previous target.
    UseCurrent,
}

impl fmt::Display for FirstStepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FirstStepPolicy::SkipPrevTerm => "skip-prev-term",
            FirstStepPolicy::UseCurrent => "use-current",
        })
    }
}

impl FromStr for FirstStepPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip-prev-term" => Ok(FirstStepPolicy::SkipPrevTerm),
            "use-current" => Ok(FirstStepPolicy::UseCurrent),
            other => Err(Error::Config(format!(
                "first_step_policy must be skip-prev-term or use-current, got `{other}`"
            ))),
        }
    }
}

/// Weights and switches for representation and coherence guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta_f: f64,
    pub beta_p: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Classifier-free scale on the guided chains.
    pub cfg_scale: f64,
    /// Classifier-free scale during source inversion.
    pub inversion_cfg_scale: f64,
    /// Max-norm clip on `∇L`; off when `None`.
    pub gradient_clip: Option<f64>,
    pub first_step_policy: FirstStepPolicy,
    pub gradient_mode: GradientMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            beta_f: 1.0,
            beta_p: 0.0,
            lambda3: 1.0,
            lambda4: 1.0,
            cfg_scale: 1.0,
            inversion_cfg_scale: 1.0,
            gradient_clip: None,
            first_step_policy: FirstStepPolicy::SkipPrevTerm,
            gradient_mode: GradientMode::default(),
        }
    }
}

const GUIDANCE_KEYS: &[&str] = &[
    "lambda1",
    "lambda2",
    "beta_f",
    "beta_p",
    "cfg_scale",
    "inversion_cfg_scale",
    "gradient_clip",
    "first_step_policy",
    "gradient_mode",
    "fd_step",
];

impl GuidanceConfig {
    /// Defaults for pretrained adapters (classifier-free scale 7.5).
    pub fn pretrained() -> Self {
        Self {
            cfg_scale: 7.5,
            ..Self::default()
        }
    }

    /// Representation guidance off; coherence weights unchanged.
    pub fn without_representation(mut self) -> Self {
        self.lambda1 = 0.0;
        self.lambda2 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta_f", self.beta_f),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("cfg_scale", self.cfg_scale),
            ("inversion_cfg_scale", self.inversion_cfg_scale),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.beta_p.is_finite() {
            return Err(Error::Config(format!("beta_p must be finite, got {}", self.beta_p)));
        }
        if let Some(c) = self.gradient_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Override fields from `guidance.*` and `coherence.lambda{3,4}` keys.
    pub fn apply_kv(&mut self, map: &KvMap) -> Result<()> {
        map.reject_unknown("guidance.", GUIDANCE_KEYS)?;
        let g = |k: &str| format!("guidance.{k}");
        self.lambda1 = map.parse_or(&g("lambda1"), self.lambda1)?;
        self.lambda2 = map.parse_or(&g("lambda2"), self.lambda2)?;
        self.beta_f = map.parse_or(&g("beta_f"), self.beta_f)?;
        self.beta_p = map.parse_or(&g("beta_p"), self.beta_p)?;
        self.cfg_scale = map.parse_or(&g("cfg_scale"), self.cfg_scale)?;
        self.inversion_cfg_scale = map.parse_or(&g("inversion_cfg_scale"), self.inversion_cfg_scale)?;
        if let Some(v) = map.get(&g("gradient_clip")) {
            self.gradient_clip = match v {
                "" | "none" | "off" => None,
                _ => Some(map.require(&g("gradient_clip"))?),
            };
        }
        if let Some(p) = map.parse_opt(&g("first_step_policy"))? {
            self.first_step_policy = p;
        }
        let fd_step: Option<f64> = map.parse_opt(&g("fd_step"))?;
        let fd = FiniteDifference::Coordinate {
            rel_step: fd_step.unwrap_or(1e-4),
        };
        if let Some(mode) = map.get(&g("gradient_mode")) {
            self.gradient_mode = match mode {
                "analytic" => GradientMode::Analytic,
                "finite-difference" => GradientMode::FiniteDifference(fd),
                "auto" => GradientMode::Auto(fd),
                other => {
                    return Err(Error::Config(format!(
                        "gradient_mode must be analytic, finite-difference or auto, got `{other}`"
                    )))
                }
            };
        } else if fd_step.is_some() {
            self.gradient_mode = match self.gradient_mode {
                GradientMode::Analytic => GradientMode::Analytic,
                GradientMode::FiniteDifference(_) => GradientMode::FiniteDifference(fd),
                GradientMode::Auto(_) => GradientMode::Auto(fd),
            };
        }
        self.lambda3 = map.parse_or("coherence.lambda3", self.lambda3)?;
        self.lambda4 = map.parse_or("coherence.lambda4", self.lambda4)?;
        self.validate()
    }
}

/// Source and target prompts with their conditioning and text embeddings.
#[derive(Debug, Clone)]
pub struct PromptPair {
    pub source: String,
    pub target: String,
    pub y_src: PromptEmbedding,
    pub y_tgt: PromptEmbedding,
    pub txt_src: Array1<f64>,
    pub txt_tgt: Array1<f64>,
    pub null: PromptEmbedding,
}

impl PromptPair {
    pub fn embed(encoder: &dyn JointEncoder, source: &str, target: &str) -> Result<Self> {
        Ok(Self {
            source: source.to_string(),
            target: target.to_string(),
            y_src: encoder.embed_prompt(source)?,
            y_tgt: encoder.embed_prompt(target)?,
            txt_src: encoder.encode_text(source)?,
            txt_tgt: encoder.encode_text(target)?,
            null: encoder.null_prompt(),
        })
    }
}

/// The reverse chain's state just before the current step.
#[derive(Debug, Clone)]
pub struct PrevTarget {
    pub position: usize,
    pub features: Latent,
}

/// Everything a guided reverse step at position `t` reads.
pub struct GuidanceContext<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub bundle: &'a BackendBundle,
    pub cache: &'a TrajectoryCache,
    pub prompts: &'a PromptPair,
    predictor: ClassifierFree<'a>,
    inversion_predictor: ClassifierFree<'a>,
    prev_target: Option<PrevTarget>,
}

impl<'a> GuidanceContext<'a> {
    pub fn new(
        schedule: &'a DiffusionSchedule,
        bundle: &'a BackendBundle,
        cache: &'a TrajectoryCache,
        prompts: &'a PromptPair,
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        if cache.len() != schedule.steps() {
            return Err(Error::Cache(format!(
                "cache has {} records, schedule has {} steps",
                cache.len(),
                schedule.steps()
            )));
        }
        if cache.schedule_fingerprint() != schedule.fingerprint() {
            return Err(Error::Cache("schedule fingerprint mismatch".into()));
        }
        Ok(Self {
            schedule,
            bundle,
            cache,
            prompts,
            predictor: ClassifierFree::new(bundle.predictor.as_ref(), prompts.null.clone(), cfg.cfg_scale)?,
            inversion_predictor: ClassifierFree::new(
                bundle.predictor.as_ref(),
                prompts.null.clone(),
                cfg.inversion_cfg_scale,
            )?,
            prev_target: None,
        })
    }

    /// Noise predictor for the target chain (classifier-free when `w ≠ 1`).
    pub fn predictor(&self) -> &dyn NoisePredictor {
        &self.predictor
    }

    /// Noise predictor for the source chain (inversion scale).
    pub fn inversion_predictor(&self) -> &dyn NoisePredictor {
        &self.inversion_predictor
    }

    pub fn prev_target(&self) -> Option<&PrevTarget> {
        self.prev_target.as_ref()
    }

    /// Record `x` at `position` as the predecessor of the next step.
    pub fn set_prev_target(&mut self, position: usize, x: &Latent) -> Result<()> {
        let t = self.schedule.timestep(position)?;
        let features = self.bundle.features.features(x, t, &self.prompts.y_tgt)?;
        self.prev_target = Some(PrevTarget { position, features });
        Ok(())
    }

    pub fn clear_prev_target(&mut self) {
        self.prev_target = None;
    }

    /// `M(x_t^src, t, y_src)` from the cache.
    pub fn source_features(&self, position: usize) -> Result<Cow<'_, Latent>> {
        self.cache
            .features(position, self.bundle.features.as_ref(), self.schedule)
    }

    /// `d_prev` reference features for a step at `position` starting from `x`.
    fn prev_features(&self, position: usize, x: &Latent, policy: FirstStepPolicy) -> Result<Option<Latent>> {
        match &self.prev_target {
            Some(prev) if prev.position == position + 1 => Ok(Some(prev.features.clone())),
            Some(prev) => Err(Error::InvalidInput(format!(
                "previous target is at position {}, step is at {position}",
                prev.position
            ))),
            None if position == self.schedule.steps() => match policy {
                FirstStepPolicy::SkipPrevTerm => Ok(None),
                FirstStepPolicy::UseCurrent => {
                    let t = self.schedule.timestep(position)?;
                    Ok(Some(self.bundle.features.features(x, t, &self.prompts.y_tgt)?))
                }
            },
            None => Err(Error::InvalidInput(format!(
                "no previous target for the step at position {position}"
            ))),
        }
    }

    /// `x̂₀(x, t, y)` under the target-chain predictor.
    pub fn tweedie(&self, x: &Latent, position: usize, y: &PromptEmbedding) -> Result<Latent> {
        let t = self.schedule.timestep(position)?;
        if t.alpha <= 0.0 {
            return Err(Error::Singular(format!("alpha is zero at position {position}")));
        }
        let eps = checked_eps(&self.predictor, x, t, y)?;
        Ok((x - &(eps * (1.0 - t.alpha).sqrt())) / t.alpha.sqrt())
    }

    /// `(∂x̂₀/∂x)ᵀ v`.
    pub fn tweedie_vjp(&self, x: &Latent, position: usize, y: &PromptEmbedding, v: &Latent) -> Result<Latent> {
        let t = self.schedule.timestep(position)?;
        let e = self.predictor.epsilon_vjp(x, t, y, v)?;
        Ok((v - &(e * (1.0 - t.alpha).sqrt())) / t.alpha.sqrt())
    }
}

/// Scalar ingredients of the distance objectives at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletTerms {
    pub sim_tgt: f64,
    pub sim_src: f64,
    pub d_src: f64,
    /// `None` when the feature hinge is dropped at the first step.
    pub d_prev: Option<f64>,
}

impl TripletTerms {
    /// Argument of the prompt hinge, `Sim_tgt − Sim_src − β_p`.
    pub fn prompt_margin(&self, cfg: &GuidanceConfig) -> f64 {
        self.sim_tgt - self.sim_src - cfg.beta_p
    }

    /// Argument of the feature hinge, `β_f·d_src − d_prev`.
    pub fn feature_margin(&self, cfg: &GuidanceConfig) -> Option<f64> {
        self.d_prev.map(|d| cfg.beta_f * self.d_src - d)
    }

    pub fn triplet(&self, cfg: &GuidanceConfig) -> f64 {
        let first = -cfg.lambda1 * self.prompt_margin(cfg).min(0.0);
        let second = self.feature_margin(cfg).map_or(0.0, |m| cfg.lambda2 * m.max(0.0));
        first + second
    }

    pub fn naive(&self, cfg: &GuidanceConfig) -> f64 {
        -self.sim_tgt + cfg.beta_f * self.d_src
    }
}

/// Which distance objective a guided step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Naive,
    Triplet,
}

struct Evaluation {
    xhat: Latent,
    image: Latent,
    emb: Array1<f64>,
    feats: Latent,
    terms: TripletTerms,
}

/// `L^dist_t` as an [`Objective`] over the target latent at one position.
pub struct DistanceObjective<'c, 'a> {
    ctx: &'c GuidanceContext<'a>,
    cfg: &'c GuidanceConfig,
    kind: DistanceKind,
    position: usize,
    src_features: Latent,
    prev_features: Option<Latent>,
}

impl<'c, 'a> DistanceObjective<'c, 'a> {
    /// Bind the objective for a step at `position` that starts from `x`.
    pub fn new(
        ctx: &'c GuidanceContext<'a>,
        cfg: &'c GuidanceConfig,
        kind: DistanceKind,
        position: usize,
        x: &Latent,
    ) -> Result<Self> {
        let src_features = ctx.source_features(position)?.into_owned();
        let prev_features = match kind {
            DistanceKind::Naive => None,
            DistanceKind::Triplet => ctx.prev_features(position, x, cfg.first_step_policy)?,
        };
        Ok(Self {
            ctx,
            cfg,
            kind,
            position,
            src_features,
            prev_features,
        })
    }

    pub fn terms(&self, x: &Latent) -> Result<TripletTerms> {
        Ok(self.evaluate(x)?.terms)
    }

    fn evaluate(&self, x: &Latent) -> Result<Evaluation> {
        let ctx = self.ctx;
        let y = &ctx.prompts.y_tgt;
        let t = ctx.schedule.timestep(self.position)?;
        let xhat = ctx.tweedie(x, self.position, y)?;
        let image = ctx.bundle.codec.decode(&xhat)?;
        let emb = ctx.bundle.encoder.encode_image(&image)?;
        let feats = ctx.bundle.features.features(x, t, y)?;
        let d_src = tensor::distance(&feats, &self.src_features)?;
        let d_prev = match &self.prev_features {
            Some(p) => Some(tensor::distance(&feats, p)?),
            None => None,
        };
        let terms = TripletTerms {
            sim_tgt: cosine_similarity(&emb, &ctx.prompts.txt_tgt),
            sim_src: cosine_similarity(&emb, &ctx.prompts.txt_src),
            d_src,
            d_prev,
        };
        Ok(Evaluation {
            xhat,
            image,
            emb,
            feats,
            terms,
        })
    }

    fn value_of(&self, terms: &TripletTerms) -> f64 {
        match self.kind {
            DistanceKind::Naive => terms.naive(self.cfg),
            DistanceKind::Triplet => terms.triplet(self.cfg),
        }
    }
}

impl Objective for DistanceObjective<'_, '_> {
    fn value(&self, x: &Latent) -> Result<f64> {
        let terms = self.terms(x)?;
        Ok(self.value_of(&terms))
    }

    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)> {
        let ctx = self.ctx;
        let cfg = self.cfg;
        let y = &ctx.prompts.y_tgt;
        let t = ctx.schedule.timestep(self.position)?;
        let ev = self.evaluate(x)?;
        let value = self.value_of(&ev.terms);

        // d/de of the prompt term and d/dM of the feature term
        let (g_emb, g_feat) = match self.kind {
            DistanceKind::Naive => {
                let g_emb = -cosine_similarity_grad(&ev.emb, &ctx.prompts.txt_tgt);
                let g_feat = tensor::distance_grad(&ev.feats, &self.src_features, ev.terms.d_src) * cfg.beta_f;
                (Some(g_emb), Some(g_feat))
            }
            DistanceKind::Triplet => {
                let g_emb = (ev.terms.prompt_margin(cfg) < 0.0 && cfg.lambda1 != 0.0).then(|| {
                    (cosine_similarity_grad(&ev.emb, &ctx.prompts.txt_tgt)
                        - cosine_similarity_grad(&ev.emb, &ctx.prompts.txt_src))
                        * -cfg.lambda1
                });
                let g_feat = match (ev.terms.feature_margin(cfg), &self.prev_features, ev.terms.d_prev) {
                    (Some(m), Some(prev), Some(d_prev)) if m > 0.0 && cfg.lambda2 != 0.0 => {
                        let to_src = tensor::distance_grad(&ev.feats, &self.src_features, ev.terms.d_src);
                        let to_prev = tensor::distance_grad(&ev.feats, prev, d_prev);
                        Some((to_src * cfg.beta_f - to_prev) * cfg.lambda2)
                    }
                    _ => None,
                };
                (g_emb, g_feat)
            }
        };

        let mut grad = tensor::zeros_like(x);
        if let Some(g_emb) = g_emb {
            let g_image = ctx.bundle.encoder.encode_image_vjp(&ev.image, &g_emb)?;
            let g_xhat = ctx.bundle.codec.decode_vjp(&ev.xhat, &g_image)?;
            grad += &ctx.tweedie_vjp(x, self.position, y, &g_xhat)?;
        }
        if let Some(g_feat) = g_feat {
            grad += &ctx.bundle.features.features_vjp(x, t, y, &g_feat)?;
        }
        Ok((value, grad))
    }
}

/// Result of one guided update.
#[derive(Debug, Clone)]
pub struct GuidedStep {
    pub x: Latent,
    pub objective: f64,
    /// Norm of the applied gradient, after clipping.
    pub grad_norm: f64,
}

/// The guided reverse update from `position` to `position − 1`.
///
/// With `objective = None` no gradient is subtracted.
pub fn guided_reverse_step(
    x: &Latent,
    position: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    objective: Option<&dyn Objective>,
    cfg: &GuidanceConfig,
) -> Result<GuidedStep> {
    if position == 0 {
        return Err(Error::OffGrid {
            position,
            steps: schedule.steps(),
        });
    }
    let t = schedule.timestep(position)?;
    let a_prev = schedule.alpha(position - 1)?;
    let eps = checked_eps(predictor, x, t, y)?;
    let mut out = x * (a_prev / t.alpha).sqrt() - eps * schedule.reverse_noise_coeff(position)?;
    let (value, grad_norm) = match objective {
        Some(obj) => apply_gradient(&mut out, obj, x, cfg)?,
        None => (0.0, 0.0),
    };
    tensor::ensure_finite(&out, "guided reverse output")?;
    Ok(GuidedStep {
        x: out,
        objective: value,
        grad_norm,
    })
}

/// Evaluate `∇objective` at `x`, clip, and subtract it from `out`.
pub(crate) fn apply_gradient(
    out: &mut Latent,
    objective: &dyn Objective,
    x: &Latent,
    cfg: &GuidanceConfig,
) -> Result<(f64, f64)> {
    let (value, mut grad) = gradient_of(objective, x, &cfg.gradient_mode)?;
    let mut norm = tensor::frobenius(&grad);
    if let Some(clip) = cfg.gradient_clip {
        if norm > clip {
            grad *= clip / norm;
            norm = clip;
        }
    }
    *out -= &grad;
    Ok((value, norm))
}

/// Per-step trace entry of a guided run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Position the reverse step started from.
    pub position: usize,
    pub l_dist: f64,
    /// `L^cycle` at the step's input; `None` without coherence guidance.
    pub l_cycle: Option<f64>,
    /// Norm of the gradient applied on the target chain.
    pub grad_norm: f64,
    /// Wall time of the step in milliseconds; zero unless timing is on.
    pub ms: f64,
}

/// Knobs of a sampler run that are not guidance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub distance: DistanceKind,
    pub cache_policy: CachePolicy,
    /// Record wall time per step. Off keeps traces reproducible byte for byte.
    pub timing: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            distance: DistanceKind::Triplet,
            cache_policy: CachePolicy::Eager,
            timing: false,
        }
    }
}

/// Outcome of a full guided edit in latent space.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// The edited clean latent `x̄_0^tgt`.
    pub latent: Latent,
    /// Terminal latent of the plain source inversion.
    pub source_terminal: Latent,
    pub cache: TrajectoryCache,
    pub steps: Vec<StepRecord>,
    /// `‖F^bwd(x̄_T^src) − x̄_0^tgt‖` after an interleaved run.
    pub final_cycle: Option<f64>,
}

pub(crate) fn elapsed_ms(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
}

/// Invert `x0` under the source prompt and return the terminal latent and cache.
pub fn invert_source(
    x0: &Latent,
    prompts: &PromptPair,
    schedule: &DiffusionSchedule,
    bundle: &BackendBundle,
    cfg: &GuidanceConfig,
    policy: CachePolicy,
) -> Result<(Latent, TrajectoryCache)> {
    let pred = ClassifierFree::new(bundle.predictor.as_ref(), prompts.null.clone(), cfg.inversion_cfg_scale)?;
    run_inversion(x0, &prompts.y_src, schedule, &pred, bundle.features.as_ref(), policy)
}

/// Guided editing on the reverse chain only: invert the source, start the
/// target at `x_T^src`, and take `T` guided reverse steps.
pub fn sample_oig(
    x0: &Latent,
    prompts: &PromptPair,
    schedule: &DiffusionSchedule,
    bundle: &BackendBundle,
    cfg: &GuidanceConfig,
    opts: &SamplerOptions,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let (terminal, cache) =
        invert_source(x0, prompts, schedule, bundle, cfg, opts.cache_policy).map_err(|e| e.at_stage("inversion"))?;
    let (latent, steps) = reverse_with_guidance(&terminal, &cache, prompts, schedule, bundle, cfg, opts)
        .map_err(|e| e.at_stage("guided reverse"))?;
    Ok(SampleOutput {
        latent,
        source_terminal: terminal,
        cache,
        steps,
        final_cycle: None,
    })
}

/// The guided reverse chain from `x_T` given a completed source cache.
pub fn reverse_with_guidance(
    terminal: &Latent,
    cache: &TrajectoryCache,
    prompts: &PromptPair,
    schedule: &DiffusionSchedule,
    bundle: &BackendBundle,
    cfg: &GuidanceConfig,
    opts: &SamplerOptions,
) -> Result<(Latent, Vec<StepRecord>)> {
    let mut ctx = GuidanceContext::new(schedule, bundle, cache, prompts, cfg)?;
    let mut x = terminal.clone();
    let mut steps = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let start = opts.timing.then(std::time::Instant::now);
        let step = (|| {
            let obj = DistanceObjective::new(&ctx, cfg, opts.distance, t, &x)?;
            guided_reverse_step(&x, t, &prompts.y_tgt, schedule, ctx.predictor(), Some(&obj), cfg)
        })()
        .map_err(|e| e.in_chain("target", t))?;
        ctx.set_prev_target(t, &x)?;
        x = step.x;
        steps.push(StepRecord {
            position: t,
            l_dist: step.objective,
            l_cycle: None,
            grad_norm: step.grad_norm,
            ms: elapsed_ms(start),
        });
    }
    Ok((x, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::AnalyticGmmBackend;
    use crate::ddim::reverse_latent;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        schedule: DiffusionSchedule,
        bundle: BackendBundle,
        prompts: PromptPair,
        cache: TrajectoryCache,
    }

    fn fixture(steps: usize) -> Fixture {
        let schedule = DiffusionSchedule::default_with_steps(steps).unwrap();
        let bundle = AnalyticGmmBackend::toy_2d(3).into_bundle();
        let prompts = PromptPair::embed(bundle.encoder.as_ref(), "a photo of a cat", "a photo of a dog").unwrap();
        let x0 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-1.0, 0.4]).unwrap();
        let (_, cache) = run_inversion(
            &x0,
            &prompts.y_src,
            &schedule,
            bundle.predictor.as_ref(),
            bundle.features.as_ref(),
            CachePolicy::Eager,
        )
        .unwrap();
        Fixture {
            schedule,
            bundle,
            prompts,
            cache,
        }
    }

    fn point(rng: &mut impl Rng) -> Latent {
        ArrayD::from_shape_vec(
            IxDyn(&[2]),
            vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
        )
        .unwrap()
    }

    fn fd_grad(obj: &dyn Objective, x: &Latent) -> Latent {
        crate::backends::finite_difference_gradient(&|z: &Latent| obj.value(z), x, &FiniteDifference::default())
            .unwrap()
    }

    #[test]
    fn scalar_hinge_examples() {
        let cfg = GuidanceConfig {
            beta_p: 0.1,
            ..GuidanceConfig::default()
        };
        let terms = TripletTerms {
            sim_tgt: 0.30,
            sim_src: 0.25,
            d_src: 0.5,
            d_prev: Some(1.0),
        };
        assert!((terms.triplet(&cfg) - 0.05).abs() < 1e-12);

        let cfg = GuidanceConfig::default();
        let terms = TripletTerms {
            sim_tgt: 0.9,
            sim_src: 0.1,
            d_src: 2.0,
            d_prev: Some(1.0),
        };
        assert!((terms.triplet(&cfg) - 1.0).abs() < 1e-12);

        let orthogonal = TripletTerms {
            sim_tgt: 0.0,
            sim_src: 0.0,
            d_src: 2.0,
            d_prev: None,
        };
        assert!((orthogonal.naive(&cfg) - 2.0).abs() < 1e-12);
        let cfg0 = GuidanceConfig { beta_f: 0.0, ..cfg };
        let t = TripletTerms {
            sim_tgt: 0.4,
            ..orthogonal
        };
        assert_eq!(t.naive(&cfg0), -0.4);
    }

    #[test]
    fn naive_feature_term_vanishes_on_source() {
        let f = fixture(10);
        let cfg = GuidanceConfig::default();
        // same prompt on both sides
        let same = PromptPair::embed(f.bundle.encoder.as_ref(), "a photo of a cat", "a photo of a cat").unwrap();
        let ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &same, &cfg).unwrap();
        let x = f.cache.latent(4).unwrap().clone();
        let obj = DistanceObjective::new(&ctx, &cfg, DistanceKind::Naive, 4, &x).unwrap();
        let terms = obj.terms(&x).unwrap();
        assert_eq!(terms.d_src, 0.0);
        let recon = ctx.tweedie(&x, 4, &same.y_src).unwrap();
        let emb = f
            .bundle
            .encoder
            .encode_image(&f.bundle.codec.decode(&recon).unwrap())
            .unwrap();
        let expected = -cosine_similarity(&emb, &same.txt_src);
        assert!((obj.value(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_objective_matches_plain_reverse() {
        let f = fixture(50);
        let cfg = GuidanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = f.bundle.predictor.as_ref();
        for _ in 0..200 {
            let x = point(&mut rng);
            let t = rng.random_range(1..=50);
            let plain = reverse_latent(&x, t, &f.prompts.y_tgt, &f.schedule, pred).unwrap();
            let zero = |z: &Latent| Ok((0.0, tensor::zeros_like(z)));
            let guided = guided_reverse_step(&x, t, &f.prompts.y_tgt, &f.schedule, pred, Some(&zero), &cfg).unwrap();
            assert!(tensor::max_relative_error(&guided.x, &plain, 1e-300) <= 1e-9);
        }
    }

    #[test]
    fn quadratic_objective_subtracts_x() {
        let f = fixture(20);
        let cfg = GuidanceConfig::default();
        let pred = f.bundle.predictor.as_ref();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.7]).unwrap();
        let quad = |z: &Latent| Ok((0.5 * tensor::dot(z, z), z.clone()));
        let guided = guided_reverse_step(&x, 7, &f.prompts.y_tgt, &f.schedule, pred, Some(&quad), &cfg).unwrap();
        let plain = guided_reverse_step(&x, 7, &f.prompts.y_tgt, &f.schedule, pred, None, &cfg).unwrap();
        assert!(tensor::max_relative_error(&guided.x, &(&plain.x - &x), 1.0) < 1e-14);
        assert!((guided.grad_norm - tensor::frobenius(&x)).abs() < 1e-15);
    }

    #[test]
    fn gradient_clip_bounds_the_norm() {
        let f = fixture(20);
        let cfg = GuidanceConfig {
            gradient_clip: Some(0.1),
            ..GuidanceConfig::default()
        };
        let pred = f.bundle.predictor.as_ref();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 4.0]).unwrap();
        let quad = |z: &Latent| Ok((0.5 * tensor::dot(z, z), z.clone()));
        let guided = guided_reverse_step(&x, 7, &f.prompts.y_tgt, &f.schedule, pred, Some(&quad), &cfg).unwrap();
        let plain = guided_reverse_step(&x, 7, &f.prompts.y_tgt, &f.schedule, pred, None, &cfg).unwrap();
        assert!((guided.grad_norm - 0.1).abs() < 1e-15);
        let applied = &plain.x - &guided.x;
        assert!((tensor::frobenius(&applied) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let f = fixture(10);
        let cfg = GuidanceConfig::default();
        let pred = f.bundle.predictor.as_ref();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap();
        let bad = |z: &Latent| Ok((0.0, ArrayD::from_elem(z.raw_dim(), f64::NAN)));
        let err = guided_reverse_step(&x, 3, &f.prompts.y_tgt, &f.schedule, pred, Some(&bad), &cfg).unwrap_err();
        assert!(err.is_numeric());
        let wrong = |_: &Latent| Ok((0.0, ArrayD::zeros(IxDyn(&[3]))));
        let err = guided_reverse_step(&x, 3, &f.prompts.y_tgt, &f.schedule, pred, Some(&wrong), &cfg).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let f = fixture(50);
        let cfg = GuidanceConfig {
            beta_p: 1.5,
            beta_f: 3.0,
            ..GuidanceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..60 {
            let t = rng.random_range(1..50);
            let x = point(&mut rng);
            let mut ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &f.prompts, &cfg).unwrap();
            ctx.set_prev_target(t + 1, &point(&mut rng)).unwrap();
            for kind in [DistanceKind::Naive, DistanceKind::Triplet] {
                let obj = DistanceObjective::new(&ctx, &cfg, kind, t, &x).unwrap();
                let terms = obj.terms(&x).unwrap();
                if kind == DistanceKind::Triplet && terms.feature_margin(&cfg).unwrap().abs() < 1e-3 {
                    continue;
                }
                let (_, g) = obj.value_and_grad(&x).unwrap();
                let fd = fd_grad(&obj, &x);
                assert!(
                    tensor::max_relative_error(&g, &fd, 1e-6) < 1e-4,
                    "{kind:?} t={t}: {g} vs {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn inactive_hinges_give_zero_gradient() {
        let f = fixture(20);
        let cfg = GuidanceConfig {
            beta_p: -5.0,
            beta_f: 0.0,
            ..GuidanceConfig::default()
        };
        let mut ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &f.prompts, &cfg).unwrap();
        ctx.set_prev_target(9, &ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.2, -1.0]).unwrap())
            .unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.4, 0.2]).unwrap();
        let obj = DistanceObjective::new(&ctx, &cfg, DistanceKind::Triplet, 8, &x).unwrap();
        let (v, g) = obj.value_and_grad(&x).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(tensor::frobenius(&g), 0.0);
    }

    #[test]
    fn lambda2_scales_feature_gradient() {
        let f = fixture(20);
        let base = GuidanceConfig {
            lambda1: 0.0,
            beta_f: 3.0,
            ..GuidanceConfig::default()
        };
        let doubled = GuidanceConfig {
            lambda2: 2.0,
            ..base.clone()
        };
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.8, 0.1]).unwrap();
        let grad = |cfg: &GuidanceConfig| {
            let mut ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &f.prompts, cfg).unwrap();
            ctx.set_prev_target(6, &ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.7, 0.2]).unwrap())
                .unwrap();
            let obj = DistanceObjective::new(&ctx, cfg, DistanceKind::Triplet, 5, &x).unwrap();
            assert!(obj.terms(&x).unwrap().feature_margin(cfg).unwrap() > 0.0);
            obj.value_and_grad(&x).unwrap().1
        };
        let g1 = grad(&base);
        let g2 = grad(&doubled);
        assert!(tensor::frobenius(&g1) > 0.0);
        assert!(tensor::max_relative_error(&g2, &(&g1 * 2.0), 1e-12) < 1e-14);
    }

    #[test]
    fn first_step_policies() {
        let f = fixture(10);
        let x = f.cache.terminal().unwrap().clone();
        let skip = GuidanceConfig::default();
        let ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &f.prompts, &skip).unwrap();
        let obj = DistanceObjective::new(&ctx, &skip, DistanceKind::Triplet, 10, &x).unwrap();
        assert_eq!(obj.terms(&x).unwrap().d_prev, None);
        let current = GuidanceConfig {
            first_step_policy: FirstStepPolicy::UseCurrent,
            ..skip
        };
        let obj = DistanceObjective::new(&ctx, &current, DistanceKind::Triplet, 10, &x).unwrap();
        assert_eq!(obj.terms(&x).unwrap().d_prev, Some(0.0));
        // interior steps need a predecessor
        assert!(DistanceObjective::new(&ctx, &current, DistanceKind::Triplet, 5, &x).is_err());
    }

    #[test]
    fn guided_step_differs_from_plain_by_gradient() {
        let f = fixture(50);
        let cfg = GuidanceConfig {
            beta_p: 1.0,
            beta_f: 2.0,
            ..GuidanceConfig::default()
        };
        let mut ctx = GuidanceContext::new(&f.schedule, &f.bundle, &f.cache, &f.prompts, &cfg).unwrap();
        let x = f.cache.latent(20).unwrap() + 0.3;
        ctx.set_prev_target(21, f.cache.latent(21).unwrap()).unwrap();
        let obj = DistanceObjective::new(&ctx, &cfg, DistanceKind::Triplet, 20, &x).unwrap();
        let pred = ctx.predictor();
        let guided = guided_reverse_step(&x, 20, &f.prompts.y_tgt, &f.schedule, pred, Some(&obj), &cfg).unwrap();
        let plain = reverse_latent(&x, 20, &f.prompts.y_tgt, &f.schedule, pred).unwrap();
        let fd = fd_grad(&obj, &x);
        assert!(tensor::max_relative_error(&(&plain - &guided.x), &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn config_from_kv() {
        let map = KvMap::parse(
            "guidance.lambda1=0.5\nguidance.gradient_clip=2\nguidance.first_step_policy=use-current\n\
             guidance.gradient_mode=finite-difference\nguidance.fd_step=1e-5\ncoherence.lambda4=0.25\n",
            "test",
        )
        .unwrap();
        let mut cfg = GuidanceConfig::default();
        cfg.apply_kv(&map).unwrap();
        assert_eq!(cfg.lambda1, 0.5);
        assert_eq!(cfg.gradient_clip, Some(2.0));
        assert_eq!(cfg.first_step_policy, FirstStepPolicy::UseCurrent);
        assert_eq!(
            cfg.gradient_mode,
            GradientMode::FiniteDifference(FiniteDifference::Coordinate { rel_step: 1e-5 })
        );
        assert_eq!(cfg.lambda4, 0.25);

        let bad = KvMap::parse("guidance.lambda9=1\n", "test").unwrap();
        assert!(GuidanceConfig::default().apply_kv(&bad).is_err());
        let neg = KvMap::parse("guidance.lambda2=-1\n", "test").unwrap();
        assert!(GuidanceConfig::default().apply_kv(&neg).is_err());
        assert_eq!(GuidanceConfig::pretrained().cfg_scale, 7.5);
    }
}
