use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AdapterRegistry;
use oig_core::pipeline::{run_edit, EditConfig, EditTask};
use oig_core::schedule::DiffusionSchedule;

fn run_once(dir: &std::path::Path, coherence: bool) -> (Vec<u8>, Vec<u8>, Vec<u8>, ArrayD<f64>) {
    let src = dir.join("src.png");
    let img = ArrayD::from_shape_fn(IxDyn(&[6, 6, 3]), |ix| {
        ((ix[0] * 5 + ix[1] * 3 + ix[2] * 7) % 10) as f64 / 9.0
    });
    oig_core::imageio::save_rgb(&src, &img).unwrap();
    let mut task = EditTask::new(&src, "a cat", "a dog", dir.join("out.png"));
    task.trace = Some(dir.join("trace.csv"));
    task.cache = Some(dir.join("cache.bin"));
    task.seed = 17;
    let config = EditConfig {
        schedule: DiffusionSchedule::default_with_steps(15).unwrap(),
        coherence,
        seed: 17,
        ..EditConfig::default()
    };
    let out = run_edit(&task, &config, &AdapterRegistry::new()).unwrap();
    let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
    (read("out.png"), read("trace.csv"), read("cache.bin"), out.sample.latent)
}

#[test]
fn repeated_edits_are_bitwise_identical() {
    for coherence in [false, true] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_once(a.path(), coherence);
        let second = run_once(b.path(), coherence);
        assert_eq!(first.0, second.0, "image");
        assert_eq!(first.1, second.1, "trace");
        assert_eq!(first.2, second.2, "cache");
        let bits = |x: &ArrayD<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&first.3), bits(&second.3), "latent");
    }
}
