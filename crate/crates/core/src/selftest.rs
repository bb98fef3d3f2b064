//! Property checks on the analytic backends, run by `oig selftest`.
//!
//! Each check is small enough that the whole suite finishes in a few
//! seconds in a debug build.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{
    finite_difference_gradient, AnalyticGmmBackend, BackendBundle, ConstantEpsilonBackend, FiniteDifference,
    JointEncoder, Objective,
};
use crate::coherence::{one_step_terminal_estimate, sample_oig_plus};
use crate::ddim::{invert_between, reverse_between, reverse_latent, run_inversion, translate, CachePolicy};
use crate::guidance::{
    guided_reverse_step, sample_oig, DistanceKind, DistanceObjective, GuidanceConfig, GuidanceContext, PromptPair,
    SamplerOptions,
};
use crate::metrics::{
    background_distance, self_similarity, structure_distance, PatchProjectionEncoder, StructureEncoder,
};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{self, Latent};

/// Outcome of one named check.
#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
}

type Check = fn() -> std::result::Result<(), String>;

const CHECKS: &[(&str, Check)] = &[
    (
        "zero-objective guided step equals plain reverse step",
        zero_guidance_identity,
    ),
    ("constant-noise inversion round trip is exact", constant_round_trip),
    (
        "mixture round-trip error shrinks on finer grids",
        mixture_round_trip_refines,
    ),
    (
        "one-step terminal estimate is exact under constant noise",
        one_step_exact,
    ),
    ("zero representation weights reduce to plain translation", oig_collapse),
    (
        "zero coherence weights reduce to representation guidance",
        oig_plus_collapse,
    ),
    ("satisfied hinges give a zero gradient", hinge_inactivity),
    ("analytic guidance gradient matches finite differences", gradient_check),
    ("structure and background distances match brute force", metrics_oracle),
];

/// Run every check in order.
pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| CheckResult { name, outcome: check() })
        .collect()
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn v2(a: f64, b: f64) -> Latent {
    ArrayD::from_shape_vec(IxDyn(&[2]), vec![a, b]).expect("two values")
}

fn random_v2(rng: &mut ChaCha8Rng, r: f64) -> Latent {
    v2(rng.random_range(-r..r), rng.random_range(-r..r))
}

fn zero_guidance_identity() -> std::result::Result<(), String> {
    let b = AnalyticGmmBackend::toy_2d(0);
    let s = DiffusionSchedule::default_with_steps(50).map_err(fail)?;
    let y = b.embed_prompt("a photo of a cat").map_err(fail)?;
    let zero = |x: &Latent| Ok((0.0, tensor::zeros_like(x)));
    let cfg = GuidanceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let x = random_v2(&mut rng, 2.0);
        let t = rng.random_range(1..=50);
        let guided = guided_reverse_step(&x, t, &y, &s, &b, Some(&zero as &dyn Objective), &cfg).map_err(fail)?;
        let plain = reverse_latent(&x, t, &y, &s, &b).map_err(fail)?;
        let err = tensor::max_relative_error(&guided.x, &plain, 1e-300);
        ensure(err <= 1e-9, || format!("relative error {err:e} at t={t}"))?;
    }
    Ok(())
}

fn constant_round_trip() -> std::result::Result<(), String> {
    let b = ConstantEpsilonBackend::new(v2(0.3, -0.2));
    let y = b.encoder().embed_prompt("cat").map_err(fail)?;
    let s = DiffusionSchedule::default_with_steps(50).map_err(fail)?;
    let x0 = v2(0.7, -0.4);
    let xt = invert_between(&x0, 0, 50, &y, &s, &b).map_err(fail)?;
    let back = reverse_between(&xt, 50, 0, &y, &s, &b).map_err(fail)?;
    let err = tensor::max_relative_error(&back, &x0, 1.0);
    ensure(err <= 1e-12, || format!("round-trip error {err:e}"))
}

/// Inversion then reversal under the same prompt, for each grid size.
pub fn mixture_round_trip_errors(bundle: &BackendBundle, x0: &Latent, grids: &[usize]) -> crate::Result<Vec<f64>> {
    let y = bundle.encoder.embed_prompt("a photo of a cat")?;
    grids
        .iter()
        .map(|&n| {
            let s = DiffusionSchedule::default_with_steps(n)?;
            let p = bundle.predictor.as_ref();
            let xt = invert_between(x0, 0, n, &y, &s, p)?;
            let back = reverse_between(&xt, n, 0, &y, &s, p)?;
            tensor::distance(&back, x0)
        })
        .collect()
}

fn mixture_round_trip_refines() -> std::result::Result<(), String> {
    let bundle = AnalyticGmmBackend::toy_2d(0).into_bundle();
    let errs = mixture_round_trip_errors(&bundle, &v2(-0.9, 0.45), &[25, 50, 100]).map_err(fail)?;
    ensure(errs[0] > errs[1] && errs[1] > errs[2], || format!("errors {errs:?}"))
}

fn one_step_exact() -> std::result::Result<(), String> {
    let c = v2(0.3, -0.2);
    let b = ConstantEpsilonBackend::new(c.clone());
    let y = b.encoder().embed_prompt("cat").map_err(fail)?;
    let s = DiffusionSchedule::default_with_steps(50).map_err(fail)?;
    let u = v2(0.7, -0.4);
    for t0 in 0..=50 {
        let a = s.alpha(t0).map_err(fail)?;
        let x = &u * a.sqrt() + &c * (1.0 - a).sqrt();
        let one = one_step_terminal_estimate(&x, t0, &y, &s, &b).map_err(fail)?;
        let multi = invert_between(&x, t0, 50, &y, &s, &b).map_err(fail)?;
        let err = tensor::max_relative_error(&one, &multi, 1.0);
        ensure(err <= 1e-12, || format!("t0={t0}: error {err:e}"))?;
    }
    Ok(())
}

fn toy_task() -> crate::Result<(BackendBundle, PromptPair, DiffusionSchedule)> {
    let bundle = AnalyticGmmBackend::toy_2d(3).into_bundle();
    let prompts = PromptPair::embed(bundle.encoder.as_ref(), "a photo of a cat", "a photo of a dog")?;
    Ok((bundle, prompts, DiffusionSchedule::default_with_steps(20)?))
}

fn oig_collapse() -> std::result::Result<(), String> {
    let (bundle, prompts, s) = toy_task().map_err(fail)?;
    let cfg = GuidanceConfig::default().without_representation();
    let x0 = v2(-1.05, 0.4);
    let out = sample_oig(&x0, &prompts, &s, &bundle, &cfg, &SamplerOptions::default()).map_err(fail)?;
    let plain = translate(&x0, &prompts.y_src, &prompts.y_tgt, &s, bundle.predictor.as_ref()).map_err(fail)?;
    let err = tensor::max_relative_error(&out.latent, &plain, 1e-300);
    ensure(err <= 1e-9, || format!("relative error {err:e}"))
}

fn oig_plus_collapse() -> std::result::Result<(), String> {
    let (bundle, prompts, s) = toy_task().map_err(fail)?;
    let cfg = GuidanceConfig {
        lambda3: 0.0,
        lambda4: 0.0,
        ..GuidanceConfig::default()
    };
    let x0 = v2(-0.95, -0.5);
    let opts = SamplerOptions::default();
    let plus = sample_oig_plus(&x0, &prompts, &s, &bundle, &cfg, &opts).map_err(fail)?;
    let oig = sample_oig(&x0, &prompts, &s, &bundle, &cfg, &opts).map_err(fail)?;
    let err = tensor::max_relative_error(&plus.latent, &oig.latent, 1e-300);
    ensure(err <= 1e-9, || format!("relative error {err:e}"))
}

fn hinge_inactivity() -> std::result::Result<(), String> {
    let (bundle, prompts, s) = toy_task().map_err(fail)?;
    let (_, cache) = run_inversion(
        &v2(-1.0, 0.5),
        &prompts.y_src,
        &s,
        bundle.predictor.as_ref(),
        bundle.features.as_ref(),
        CachePolicy::Eager,
    )
    .map_err(fail)?;
    // a very negative prompt margin and beta_f = 0 satisfy both hinges everywhere
    let cfg = GuidanceConfig {
        beta_p: -5.0,
        beta_f: 0.0,
        ..GuidanceConfig::default()
    };
    let mut ctx = GuidanceContext::new(&s, &bundle, &cache, &prompts, &cfg).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let t = rng.random_range(1..s.steps());
        ctx.set_prev_target(t + 1, &random_v2(&mut rng, 1.5)).map_err(fail)?;
        let x = random_v2(&mut rng, 1.5);
        let obj = DistanceObjective::new(&ctx, &cfg, DistanceKind::Triplet, t, &x).map_err(fail)?;
        let (_, g) = obj.value_and_grad(&x).map_err(fail)?;
        let n = tensor::frobenius(&g);
        ensure(n <= 1e-12, || format!("gradient norm {n:e} at t={t}"))?;
    }
    Ok(())
}

fn gradient_check() -> std::result::Result<(), String> {
    let (bundle, prompts, s) = toy_task().map_err(fail)?;
    let (_, cache) = run_inversion(
        &v2(-1.0, 0.5),
        &prompts.y_src,
        &s,
        bundle.predictor.as_ref(),
        bundle.features.as_ref(),
        CachePolicy::Eager,
    )
    .map_err(fail)?;
    let cfg = GuidanceConfig {
        beta_f: 2.0,
        ..GuidanceConfig::default()
    };
    let mut ctx = GuidanceContext::new(&s, &bundle, &cache, &prompts, &cfg).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..25 {
        let t = rng.random_range(1..s.steps());
        ctx.set_prev_target(t + 1, &random_v2(&mut rng, 1.5)).map_err(fail)?;
        let x = random_v2(&mut rng, 1.5);
        let obj = DistanceObjective::new(&ctx, &cfg, DistanceKind::Triplet, t, &x).map_err(fail)?;
        let (_, g) = obj.value_and_grad(&x).map_err(fail)?;
        let fd =
            finite_difference_gradient(&|z: &Latent| obj.value(z), &x, &FiniteDifference::default()).map_err(fail)?;
        let err = tensor::max_relative_error(&g, &fd, 1e-3);
        ensure(err <= 1e-4, || format!("relative error {err:e} at t={t}"))?;
    }
    Ok(())
}

fn metrics_oracle() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = |rng: &mut ChaCha8Rng| ArrayD::from_shape_fn(IxDyn(&[9, 7, 3]), |_| rng.random_range(0.0..1.0));
    let (a, b) = (img(&mut rng), img(&mut rng));
    let enc = PatchProjectionEncoder::default();
    let sd = structure_distance(&a, &b, &enc).map_err(fail)?;
    let (fa, fb) = (
        enc.patch_features(&a).map_err(fail)?,
        enc.patch_features(&b).map_err(fail)?,
    );
    let n = fa.nrows();
    let cos = |f: &Array2<f64>, i: usize, j: usize| {
        let (u, v) = (f.row(i), f.row(j));
        let d = u.dot(&u).sqrt() * v.dot(&v).sqrt();
        if d == 0.0 {
            0.0
        } else {
            u.dot(&v) / d
        }
    };
    let mut brute = 0.0;
    for i in 0..n {
        for j in 0..n {
            brute += (cos(&fa, i, j) - cos(&fb, i, j)).powi(2);
        }
    }
    brute /= (n * n) as f64;
    ensure((sd - brute).abs() <= 1e-10, || format!("SD {sd} vs {brute}"))?;
    ensure(self_similarity(&fa).dim() == (n, n), || "self-similarity shape".into())?;

    let mask = Array2::from_shape_fn((9, 7), |(i, j)| (i + j) % 3 != 0);
    let bd = background_distance(&a, &b, &mask).map_err(fail)?;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..9 {
        for j in 0..7 {
            if mask[[i, j]] {
                count += 1;
                for c in 0..3 {
                    sum += (a[[i, j, c]] - b[[i, j, c]]).powi(2);
                }
            }
        }
    }
    let brute = sum / count as f64;
    ensure((bd - brute).abs() <= 1e-10, || format!("BD {bd} vs {brute}"))
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run() {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }
}
