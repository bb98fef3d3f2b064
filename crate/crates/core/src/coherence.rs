//! Coherence guidance: cycle consistency between the source and target chains.
//!
//! The source chain is re-inverted with guidance while the target chain is
//! reversed, alternating one source step and one target step. Two cycle
//! objectives tie the chains together:
//!
//! * `L^cycle = ‖F^bwd(x̄_{T,f}) − x̂₀(x̄_t^tgt)‖`, where `x̄_{T,f}` is a one-step
//!   terminal estimate from the newest source latent and `F^bwd` the plain
//!   reverse under the target prompt. Only the Tweedie term is differentiated.
//! * `L^cycle,eff = ‖x̄_{T,f}(x̄_s^src) − F^fwd(x̂₀(current target))‖`, compared in
//!   terminal space. Only the single `ε` inside the one-step estimate is
//!   differentiated.

use crate::backends::{BackendBundle, NoisePredictor, Objective, PromptEmbedding};
use crate::ddim::{checked_eps, invert_between, reverse_between};
use crate::error::{Error, Result};
use crate::guidance::{
    apply_gradient, elapsed_ms, invert_source, DistanceObjective, GuidanceConfig, GuidanceContext, GuidedStep,
    PromptPair, SampleOutput, SamplerOptions, StepRecord,
};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{self, Latent};

/// Coefficients `(a, b)` of the one-step estimate `a·x + b·ε(x, t0)`.
fn one_step_coefficients(schedule: &DiffusionSchedule, t0: usize) -> Result<(f64, f64)> {
    let a_t0 = schedule.alpha(t0)?;
    if a_t0 <= 0.0 {
        return Err(Error::Singular(format!("alpha is zero at position {t0}")));
    }
    let a_terminal = schedule.alpha(schedule.steps())?;
    let ratio = (a_terminal / a_t0).sqrt();
    Ok((ratio, (1.0 - a_terminal).sqrt() - ratio * (1.0 - a_t0).sqrt()))
}

/// Jump from position `t0` straight to the terminal position with one `ε` evaluation:
/// `√(α_T/α_t0)·x + (√(1−α_T) − √(α_T(1−α_t0)/α_t0))·ε(x, t0, y)`.
pub fn one_step_terminal_estimate(
    x: &Latent,
    t0: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    let (a, b) = one_step_coefficients(schedule, t0)?;
    let eps = checked_eps(predictor, x, schedule.timestep(t0)?, y)?;
    Ok(x * a + eps * b)
}

/// `(∂ one_step / ∂x)ᵀ v`.
pub fn one_step_terminal_vjp(
    x: &Latent,
    t0: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    v: &Latent,
) -> Result<Latent> {
    let (a, b) = one_step_coefficients(schedule, t0)?;
    let e = predictor.epsilon_vjp(x, schedule.timestep(t0)?, y, v)?;
    Ok(v * a + e * b)
}

/// `‖x̄_{0,f} − x̄_{0,b}‖₂,₂`.
pub fn cycle_objective(image_forward: &Latent, image_backward: &Latent) -> Result<f64> {
    tensor::distance(image_forward, image_backward)
}

/// `‖x̄_{T,f} − x̄_{T,b}‖₂,₂`.
pub fn efficient_cycle_objective(terminal_forward: &Latent, terminal_backward: &Latent) -> Result<f64> {
    tensor::distance(terminal_forward, terminal_backward)
}

/// The intermediate estimates behind one cycle-objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleEstimates {
    /// `x̄_{T,f}^tgt`, the one-step terminal estimate from the source latent.
    pub terminal_forward: Latent,
    /// `x̄_{0,f}^tgt`; only computed on the image-space path.
    pub image_forward: Option<Latent>,
    /// `x̄_{0,b}^tgt`, the Tweedie estimate of the target latent.
    pub image_backward: Latent,
    /// `x̄_{T,b}^tgt`; only computed on the terminal-space path.
    pub terminal_backward: Option<Latent>,
    pub t0: usize,
}

/// `L^cycle` for the target step at `position`, as an objective over the target latent.
pub struct CycleObjective<'c, 'a> {
    ctx: &'c GuidanceContext<'a>,
    position: usize,
    t0: usize,
    terminal_forward: Latent,
    image_forward: Latent,
}

impl<'c, 'a> CycleObjective<'c, 'a> {
    /// `source` is the source-chain latent at `t0 = T − position + 1`.
    pub fn new(ctx: &'c GuidanceContext<'a>, position: usize, source: &Latent) -> Result<Self> {
        let steps = ctx.schedule.steps();
        if position == 0 || position > steps {
            return Err(Error::OffGrid { position, steps });
        }
        let t0 = steps - position + 1;
        Self::with_t0(ctx, position, t0, source)
    }

    /// As [`CycleObjective::new`] with an explicit intermediate position.
    pub fn with_t0(ctx: &'c GuidanceContext<'a>, position: usize, t0: usize, source: &Latent) -> Result<Self> {
        let steps = ctx.schedule.steps();
        let pred = ctx.predictor();
        let terminal_forward = one_step_terminal_estimate(source, t0, &ctx.prompts.y_src, ctx.schedule, pred)?;
        let image_forward = reverse_between(&terminal_forward, steps, 0, &ctx.prompts.y_tgt, ctx.schedule, pred)?;
        Ok(Self {
            ctx,
            position,
            t0,
            terminal_forward,
            image_forward,
        })
    }

    pub fn image_forward(&self) -> &Latent {
        &self.image_forward
    }

    pub fn estimates(&self, x: &Latent) -> Result<CycleEstimates> {
        Ok(CycleEstimates {
            terminal_forward: self.terminal_forward.clone(),
            image_forward: Some(self.image_forward.clone()),
            image_backward: self.ctx.tweedie(x, self.position, &self.ctx.prompts.y_tgt)?,
            terminal_backward: None,
            t0: self.t0,
        })
    }
}

impl Objective for CycleObjective<'_, '_> {
    fn value(&self, x: &Latent) -> Result<f64> {
        let backward = self.ctx.tweedie(x, self.position, &self.ctx.prompts.y_tgt)?;
        cycle_objective(&self.image_forward, &backward)
    }

    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)> {
        let y = &self.ctx.prompts.y_tgt;
        let backward = self.ctx.tweedie(x, self.position, y)?;
        let value = cycle_objective(&self.image_forward, &backward)?;
        let g = tensor::distance_grad(&backward, &self.image_forward, value);
        Ok((value, self.ctx.tweedie_vjp(x, self.position, y, &g)?))
    }
}

/// `L^cycle,eff` for the source step at `position`, as an objective over the source latent.
pub struct EfficientCycleObjective<'c, 'a> {
    ctx: &'c GuidanceContext<'a>,
    position: usize,
    image_backward: Latent,
    terminal_backward: Latent,
}

impl<'c, 'a> EfficientCycleObjective<'c, 'a> {
    /// `target` is the current target-chain latent, at `target_position`.
    pub fn new(ctx: &'c GuidanceContext<'a>, position: usize, target: &Latent, target_position: usize) -> Result<Self> {
        let pred = ctx.predictor();
        let y = &ctx.prompts.y_tgt;
        let image_backward = ctx.tweedie(target, target_position, y)?;
        let terminal_backward = invert_between(&image_backward, 0, ctx.schedule.steps(), y, ctx.schedule, pred)?;
        Ok(Self {
            ctx,
            position,
            image_backward,
            terminal_backward,
        })
    }

    pub fn terminal_backward(&self) -> &Latent {
        &self.terminal_backward
    }

    pub fn estimates(&self, x: &Latent) -> Result<CycleEstimates> {
        Ok(CycleEstimates {
            terminal_forward: self.forward(x)?,
            image_forward: None,
            image_backward: self.image_backward.clone(),
            terminal_backward: Some(self.terminal_backward.clone()),
            t0: self.position,
        })
    }

    fn forward(&self, x: &Latent) -> Result<Latent> {
        let ctx = self.ctx;
        one_step_terminal_estimate(x, self.position, &ctx.prompts.y_src, ctx.schedule, ctx.predictor())
    }
}

impl Objective for EfficientCycleObjective<'_, '_> {
    fn value(&self, x: &Latent) -> Result<f64> {
        efficient_cycle_objective(&self.forward(x)?, &self.terminal_backward)
    }

    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)> {
        let ctx = self.ctx;
        let forward = self.forward(x)?;
        let value = efficient_cycle_objective(&forward, &self.terminal_backward)?;
        let g = tensor::distance_grad(&forward, &self.terminal_backward, value);
        let grad = one_step_terminal_vjp(x, self.position, &ctx.prompts.y_src, ctx.schedule, ctx.predictor(), &g)?;
        Ok((value, grad))
    }
}

/// `Σ wᵢ·Lᵢ`. Terms with zero weight are never evaluated.
pub struct WeightedSum<'o> {
    terms: Vec<(f64, &'o dyn Objective)>,
}

impl<'o> WeightedSum<'o> {
    pub fn new(terms: impl IntoIterator<Item = (f64, &'o dyn Objective)>) -> Self {
        Self {
            terms: terms.into_iter().filter(|(w, _)| *w != 0.0).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

impl Objective for WeightedSum<'_> {
    fn value(&self, x: &Latent) -> Result<f64> {
        let mut total = 0.0;
        for (w, obj) in &self.terms {
            total += w * obj.value(x)?;
        }
        Ok(total)
    }

    fn value_and_grad(&self, x: &Latent) -> Result<(f64, Latent)> {
        let mut total = 0.0;
        let mut grad = tensor::zeros_like(x);
        for (w, obj) in &self.terms {
            let (v, g) = obj.value_and_grad(x)?;
            tensor::same_shape(x, &g)?;
            total += w * v;
            grad.scaled_add(*w, &g);
        }
        Ok((total, grad))
    }
}

/// Guided inversion update from `position` to `position + 1`:
/// `√(α_{s+1}/α_s)·x − √(1−α_s)·γ'_s·ε(x,s,y) − ∇objective`.
pub fn guided_forward_step(
    x: &Latent,
    position: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    objective: Option<&dyn Objective>,
    cfg: &GuidanceConfig,
) -> Result<GuidedStep> {
    if position >= schedule.steps() {
        return Err(Error::OffGrid {
            position: position + 1,
            steps: schedule.steps(),
        });
    }
    let t = schedule.timestep(position)?;
    let a_next = schedule.alpha(position + 1)?;
    let eps = checked_eps(predictor, x, t, y)?;
    let mut out = x * (a_next / t.alpha).sqrt() - eps * schedule.forward_noise_coeff(position)?;
    let (value, grad_norm) = match objective {
        Some(obj) => apply_gradient(&mut out, obj, x, cfg)?,
        None => (0.0, 0.0),
    };
    tensor::ensure_finite(&out, "guided forward output")?;
    Ok(GuidedStep {
        x: out,
        objective: value,
        grad_norm,
    })
}

/// One source-chain step with `λ₃·L^cycle,eff`.
pub fn forward_with_guidance(
    source: &Latent,
    position: usize,
    ctx: &GuidanceContext<'_>,
    cfg: &GuidanceConfig,
    target: &Latent,
    target_position: usize,
) -> Result<GuidedStep> {
    let pred = ctx.inversion_predictor();
    if cfg.lambda3 == 0.0 {
        return guided_forward_step(source, position, &ctx.prompts.y_src, ctx.schedule, pred, None, cfg);
    }
    let eff = EfficientCycleObjective::new(ctx, position, target, target_position)?;
    let weighted = WeightedSum::new([(cfg.lambda3, &eff as &dyn Objective)]);
    guided_forward_step(
        source,
        position,
        &ctx.prompts.y_src,
        ctx.schedule,
        pred,
        Some(&weighted),
        cfg,
    )
}

/// One target-chain step with `L^dist_t + λ₄·L^cycle`.
pub fn backward_with_guidance(
    target: &Latent,
    position: usize,
    ctx: &GuidanceContext<'_>,
    cfg: &GuidanceConfig,
    dist: &DistanceObjective<'_, '_>,
    cycle: Option<&CycleObjective<'_, '_>>,
) -> Result<GuidedStep> {
    let mut terms: Vec<(f64, &dyn Objective)> = vec![(1.0, dist)];
    if let Some(c) = cycle {
        terms.push((cfg.lambda4, c));
    }
    let sum = WeightedSum::new(terms);
    crate::guidance::guided_reverse_step(
        target,
        position,
        &ctx.prompts.y_tgt,
        ctx.schedule,
        ctx.predictor(),
        Some(&sum),
        cfg,
    )
}

/// Interleaved editing: for `k = 1..=T` advance the source chain from `k−1`
/// to `k`, then the target chain from `T−k+1` to `T−k`. The source chain
/// starts at `x0`, the target chain at the plain inversion's `x_T^src`.
pub fn sample_oig_plus(
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
    let mut ctx = GuidanceContext::new(schedule, bundle, &cache, prompts, cfg)?;
    let steps_total = schedule.steps();
    let mut source = x0.clone();
    let mut target = terminal.clone();
    let mut steps = Vec::with_capacity(steps_total);
    for k in 1..=steps_total {
        let s = k - 1;
        let t = steps_total - k + 1;
        let start = opts.timing.then(std::time::Instant::now);
        source = forward_with_guidance(&source, s, &ctx, cfg, &target, t)
            .map_err(|e| e.in_chain("source", s).at_stage("interleaved sampling"))?
            .x;
        let (step, l_dist, l_cycle) = (|| {
            let dist = DistanceObjective::new(&ctx, cfg, opts.distance, t, &target)?;
            let cycle = CycleObjective::new(&ctx, t, &source)?;
            let step = backward_with_guidance(&target, t, &ctx, cfg, &dist, Some(&cycle))?;
            Ok::<_, Error>((step, dist.value(&target)?, cycle.value(&target)?))
        })()
        .map_err(|e| e.in_chain("target", t).at_stage("interleaved sampling"))?;
        ctx.set_prev_target(t, &target)?;
        target = step.x;
        steps.push(StepRecord {
            position: t,
            l_dist,
            l_cycle: Some(l_cycle),
            grad_norm: step.grad_norm,
            ms: elapsed_ms(start),
        });
    }
    let reconstructed = reverse_between(&source, steps_total, 0, &prompts.y_tgt, schedule, ctx.predictor())?;
    let final_cycle = cycle_objective(&reconstructed, &target)?;
    drop(ctx);
    Ok(SampleOutput {
        latent: target,
        source_terminal: terminal,
        cache,
        steps,
        final_cycle: Some(final_cycle),
    })
}
