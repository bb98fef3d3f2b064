//! Deterministic DDIM inversion and reversal.
//!
//! Inversion from position `s` to `s+1`:
//! `x_{s+1} = √α_{s+1}·(x_s − √(1−α_s)·ε)/√α_s + √(1−α_{s+1})·ε`, with `ε`
//! evaluated at `(x_s, s)`. Reversal from `t` to `t−1` is the same update
//! with the roles of the two coefficients swapped.

use crate::backends::{FeatureExtractor, NoisePredictor, PromptEmbedding};
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{self, Latent};

mod cache;

pub use cache::{CacheHeader, CachePolicy, CacheRecord, TrajectoryCache, CACHE_MAGIC};

/// Which prompt a latent is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// A latent at a sampling position together with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Latent,
    pub position: usize,
    pub role: Role,
    pub y: PromptEmbedding,
}

impl LatentState {
    pub fn new(x: Latent, position: usize, role: Role, y: PromptEmbedding) -> Self {
        Self { x, position, role, y }
    }
}

/// One inversion update on a bare latent.
pub fn invert_latent(
    x: &Latent,
    position: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    if position >= schedule.steps() {
        return Err(Error::OffGrid {
            position: position + 1,
            steps: schedule.steps(),
        });
    }
    let t = schedule.timestep(position)?;
    let a_next = schedule.alpha(position + 1)?;
    let eps = checked_eps(predictor, x, t, y)?;
    let out = (x - &(&eps * (1.0 - t.alpha).sqrt())) * (a_next.sqrt() / t.alpha.sqrt()) + eps * (1.0 - a_next).sqrt();
    tensor::ensure_finite(&out, "inversion output")?;
    Ok(out)
}

/// One plain reverse update on a bare latent.
pub fn reverse_latent(
    x: &Latent,
    position: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    if position == 0 {
        return Err(Error::OffGrid {
            position,
            steps: schedule.steps(),
        });
    }
    let t = schedule.timestep(position)?;
    let a_prev = schedule.alpha(position - 1)?;
    let eps = checked_eps(predictor, x, t, y)?;
    let out = (x - &(&eps * (1.0 - t.alpha).sqrt())) * (a_prev.sqrt() / t.alpha.sqrt()) + eps * (1.0 - a_prev).sqrt();
    tensor::ensure_finite(&out, "reverse output")?;
    Ok(out)
}

pub(crate) fn checked_eps(
    predictor: &dyn NoisePredictor,
    x: &Latent,
    t: crate::schedule::Timestep,
    y: &PromptEmbedding,
) -> Result<Latent> {
    let eps = predictor.epsilon(x, t, y)?;
    tensor::same_shape(x, &eps)?;
    tensor::ensure_finite(&eps, "noise prediction")?;
    Ok(eps)
}

/// Advance a state one position along the inversion direction.
pub fn invert_step(
    state: &LatentState,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<LatentState> {
    let x = invert_latent(&state.x, state.position, &state.y, schedule, predictor)?;
    Ok(LatentState {
        x,
        position: state.position + 1,
        role: state.role,
        y: state.y.clone(),
    })
}

/// Move a state one position towards the clean boundary.
pub fn reverse_step(
    state: &LatentState,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<LatentState> {
    let x = reverse_latent(&state.x, state.position, &state.y, schedule, predictor)?;
    Ok(LatentState {
        x,
        position: state.position - 1,
        role: state.role,
        y: state.y.clone(),
    })
}

/// `x̂₀ = (x − √(1−α_t)·ε(x,t,y)) / √α_t`.
pub fn tweedie_estimate(
    x: &Latent,
    position: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    let t = schedule.timestep(position)?;
    if t.alpha <= 0.0 {
        return Err(Error::Singular(format!("alpha is zero at position {position}")));
    }
    let eps = checked_eps(predictor, x, t, y)?;
    Ok((x - &(eps * (1.0 - t.alpha).sqrt())) / t.alpha.sqrt())
}

/// Plain inversion from `from` up to `to`.
pub fn invert_between(
    x: &Latent,
    from: usize,
    to: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    let mut x = x.clone();
    for s in from..to {
        x = invert_latent(&x, s, y, schedule, predictor).map_err(|e| e.in_chain("inversion", s))?;
    }
    Ok(x)
}

/// Plain reverse from `from` down to `to`.
pub fn reverse_between(
    x: &Latent,
    from: usize,
    to: usize,
    y: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    let mut x = x.clone();
    for t in (to + 1..=from).rev() {
        x = reverse_latent(&x, t, y, schedule, predictor).map_err(|e| e.in_chain("reverse", t))?;
    }
    Ok(x)
}

/// Invert a clean latent under `y_src`, recording every grid state.
pub fn run_inversion(
    x0: &Latent,
    y_src: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    features: &dyn FeatureExtractor,
    policy: CachePolicy,
) -> Result<(Latent, TrajectoryCache)> {
    tensor::ensure_finite(x0, "source latent")?;
    let mut cache = TrajectoryCache::new(schedule, y_src.clone(), policy);
    let mut x = x0.clone();
    for s in 0..schedule.steps() {
        x = invert_latent(&x, s, y_src, schedule, predictor).map_err(|e| e.in_chain("inversion", s))?;
        let position = s + 1;
        let feats = match policy {
            CachePolicy::Eager => Some(
                features
                    .features(&x, schedule.timestep(position)?, y_src)
                    .map_err(|e| e.in_chain("inversion", position))?,
            ),
            CachePolicy::Recompute => None,
        };
        cache.push(CacheRecord {
            position,
            latent: x.clone(),
            features: feats,
        })?;
    }
    cache.seal();
    Ok((x, cache))
}

/// Plain DDIM translation: invert under the source prompt, reverse under the target.
pub fn translate(
    x0: &Latent,
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    let steps = schedule.steps();
    let terminal = invert_between(x0, 0, steps, y_src, schedule, predictor)?;
    reverse_between(&terminal, steps, 0, y_tgt, schedule, predictor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{AnalyticGmmBackend, ConstantEpsilonBackend, JointEncoder};
    use ndarray::{ArrayD, IxDyn};

    struct Fixed(f64);
    impl NoisePredictor for Fixed {
        fn epsilon(&self, x: &Latent, _t: crate::schedule::Timestep, _y: &PromptEmbedding) -> Result<Latent> {
            Ok(ArrayD::from_elem(x.raw_dim(), self.0))
        }
    }

    fn scalar(v: f64) -> Latent {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    fn null() -> PromptEmbedding {
        PromptEmbedding::null(4)
    }

    #[test]
    fn invert_step_hand_evaluation() {
        // positions: 1 -> 0.9, 2 -> 0.8
        let s = DiffusionSchedule::from_alphas(vec![0.9, 0.8]).unwrap();
        let out = invert_latent(&scalar(1.0), 1, &null(), &s, &Fixed(0.5)).unwrap()[[0]];
        let expected = 0.8_f64.sqrt() * (1.0 - 0.1_f64.sqrt() * 0.5) / 0.9_f64.sqrt() + 0.2_f64.sqrt() * 0.5;
        assert!((out - expected).abs() < 1e-15);
        assert!((out - 1.0173).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_collapses_to_rescale() {
        let s = DiffusionSchedule::from_alphas(vec![0.9, 0.8]).unwrap();
        let up = invert_latent(&scalar(2.0), 1, &null(), &s, &Fixed(0.0)).unwrap()[[0]];
        assert!((up - (0.8_f64 / 0.9).sqrt() * 2.0).abs() < 1e-15);
        let down = reverse_latent(&scalar(2.0), 2, &null(), &s, &Fixed(0.0)).unwrap()[[0]];
        assert!((down - (0.9_f64 / 0.8).sqrt() * 2.0).abs() < 1e-15);
    }

    #[test]
    fn equal_alpha_is_identity() {
        // equal adjacent alphas cannot live in a valid schedule, so use the bare formula
        let a: f64 = 0.6;
        let x = 1.7;
        let eps = 0.3;
        let out = a.sqrt() * (x - (1.0 - a).sqrt() * eps) / a.sqrt() + (1.0 - a).sqrt() * eps;
        assert!((out - x).abs() < 1e-15);
    }

    #[test]
    fn constant_backend_exact_inverse() {
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        let c = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.8, 0.1]).unwrap();
        let b = ConstantEpsilonBackend::new(c);
        let y = b.encoder().embed_prompt("a cat").unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 0.2, -1.0]).unwrap();
        for pos in 0..50 {
            let up = invert_latent(&x, pos, &y, &s, &b).unwrap();
            let back = reverse_latent(&up, pos + 1, &y, &s, &b).unwrap();
            assert!(tensor::max_relative_error(&back, &x, 1.0) <= 1e-12);
        }
    }

    #[test]
    fn tweedie_cases() {
        let s = DiffusionSchedule::from_alphas(vec![0.25]).unwrap();
        let out = tweedie_estimate(&scalar(2.0), 1, &null(), &s, &Fixed(0.0)).unwrap()[[0]];
        assert!((out - 4.0).abs() < 1e-15);

        let s = DiffusionSchedule::default_with_steps(20).unwrap();
        let c = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.4, -0.1]).unwrap();
        let u = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.5, 2.5]).unwrap();
        let b = ConstantEpsilonBackend::new(c.clone());
        let y = b.encoder().embed_prompt("x").unwrap();
        for pos in 1..=20 {
            let a = s.alpha(pos).unwrap();
            let x = &u * a.sqrt() + &c * (1.0 - a).sqrt();
            let est = tweedie_estimate(&x, pos, &y, &s, &b).unwrap();
            assert!(tensor::max_relative_error(&est, &u, 1.0) < 1e-12);
        }
    }

    #[test]
    fn tweedie_single_gaussian_approaches_mean_at_high_noise() {
        use crate::backends::{MixtureComponent, VocabularyEncoder};
        use ndarray::{Array1, Array2};
        let enc = VocabularyEncoder::new(4, 0, 1);
        let label = enc.token_vector("x");
        let b = AnalyticGmmBackend::new(
            vec![1],
            vec![MixtureComponent {
                weight: 1.0,
                mean: Array1::from(vec![0.8]),
                variance: Array1::from(vec![0.2]),
                label,
            }],
            1.0,
            Array2::from_elem((1, 1), 1.0),
            enc,
        )
        .unwrap();
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        let y = b.null_prompt();
        let x = scalar(0.3);
        let mut last_gap = f64::INFINITY;
        for pos in [10, 30, 50] {
            let est = tweedie_estimate(&x, pos, &y, &s, &b).unwrap()[[0]];
            let a = s.alpha(pos).unwrap();
            let closed = 0.8 + a.sqrt() * 0.2 / (a * 0.2 + 1.0 - a) * (0.3 - a.sqrt() * 0.8);
            assert!((est - closed).abs() < 1e-12);
            let gap = (est - 0.8).abs();
            assert!(gap < last_gap);
            last_gap = gap;
        }
        assert!(last_gap < 0.05);
    }

    #[test]
    fn single_step_grid_has_one_record() {
        let s = DiffusionSchedule::default_with_steps(1).unwrap();
        let b = AnalyticGmmBackend::toy_2d(0);
        let y = b.embed_prompt("a cat").unwrap();
        let x0 = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-1.0, 0.4]).unwrap();
        let (_, cache) = run_inversion(&x0, &y, &s, &b, &b, CachePolicy::Eager).unwrap();
        assert_eq!(cache.len(), 1);
        assert!(cache.is_sealed());
    }

    #[test]
    fn constant_backend_inversion_matches_closed_form() {
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        let c = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2, -0.6]).unwrap();
        let b = ConstantEpsilonBackend::new(c.clone());
        let bundle = b.clone().into_bundle();
        let y = bundle.encoder.embed_prompt("a cat").unwrap();
        let u = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.9, 0.1]).unwrap();
        let (xt, cache) = run_inversion(&u, &y, &s, &b, bundle.features.as_ref(), CachePolicy::Eager).unwrap();
        let a = s.alpha(50).unwrap();
        let closed = &u * a.sqrt() + &c * (1.0 - a).sqrt();
        assert!(tensor::max_relative_error(&xt, &closed, 1.0) < 1e-12);
        for pos in 1..=50 {
            let a = s.alpha(pos).unwrap();
            let expect = &u * a.sqrt() + &c * (1.0 - a).sqrt();
            assert!(tensor::max_relative_error(cache.latent(pos).unwrap(), &expect, 1.0) < 1e-12);
        }
    }

    #[test]
    fn shape_is_preserved_and_bad_positions_rejected() {
        let s = DiffusionSchedule::default_with_steps(10).unwrap();
        let b = AnalyticGmmBackend::toy_2d(0);
        let y = b.embed_prompt("a dog").unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, 0.2]).unwrap();
        let st = LatentState::new(x, 0, Role::Source, y);
        let up = invert_step(&st, &s, &b).unwrap();
        assert_eq!(up.x.shape(), &[2]);
        assert_eq!(up.position, 1);
        let down = reverse_step(&up, &s, &b).unwrap();
        assert_eq!(down.x.shape(), &[2]);
        assert!(reverse_step(&st, &s, &b).is_err());
        let top = LatentState { position: 10, ..st };
        assert!(invert_step(&top, &s, &b).is_err());
    }

    #[test]
    fn non_finite_prediction_trips_guard() {
        let s = DiffusionSchedule::default_with_steps(10).unwrap();
        let err = invert_latent(&scalar(1.0), 2, &null(), &s, &Fixed(f64::NAN)).unwrap_err();
        assert!(err.is_numeric());
    }
}
