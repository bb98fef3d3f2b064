//! Build, save, reload and verify a source trajectory cache.

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AnalyticGmmBackend;
use oig_core::ddim::{run_inversion, CachePolicy, TrajectoryCache};
use oig_core::guidance::PromptPair;
use oig_core::schedule::DiffusionSchedule;

fn main() -> oig_core::Result<()> {
    let bundle = AnalyticGmmBackend::preset(&[4, 4, 3], &["cat", "dog"], 0.05, 0)?.into_bundle();
    let prompts = PromptPair::embed(bundle.encoder.as_ref(), "a cat", "a dog")?;
    let schedule = DiffusionSchedule::default_with_steps(25)?;
    let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 4, 3]), |ix| (ix[0] as f64 - ix[1] as f64) * 0.2);
    let p = bundle.predictor.as_ref();
    let f = bundle.features.as_ref();

    let (terminal, eager) = run_inversion(&x0, &prompts.y_src, &schedule, p, f, CachePolicy::Eager)?;
    let (_, lazy) = run_inversion(&x0, &prompts.y_src, &schedule, p, f, CachePolicy::Recompute)?;
    println!(
        "{} records, terminal norm {:.4}",
        eager.len(),
        terminal.mapv(|v| v * v).sum().sqrt()
    );

    let path = std::env::temp_dir().join(format!("oig-cache-{}.bin", std::process::id()));
    eager.save(&path, &schedule, 42)?;
    let (loaded, loaded_schedule, header) = TrajectoryCache::load(&path)?;
    loaded.verify(&loaded_schedule, &prompts.y_src)?;
    println!(
        "reloaded: seed {}, prompt `{}`, latent shape {:?}, schedule fingerprint {}",
        header.seed,
        header.prompt_text,
        header.latent_shape,
        &header.schedule_fingerprint[..12]
    );

    // eager storage and on-demand recomputation give the same features
    let position = 10;
    let stored = eager.features(position, f, &schedule)?;
    let recomputed = lazy.features(position, f, &schedule)?;
    println!(
        "eager and recomputed features at position {position} agree: {}",
        stored.as_ref() == recomputed.as_ref()
    );

    // the file stores f32, so reloaded values differ from f64 ones by rounding only
    let reloaded = loaded.features(position, f, &loaded_schedule)?;
    let rounding = oig_core::tensor::max_relative_error(&reloaded, &stored, 1.0);
    println!("reloaded features relative rounding error {rounding:.1e}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
