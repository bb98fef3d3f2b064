//! Edit a PNG end to end with the mixture backend built for its resolution.
//!
//! Usage: `cargo run --example image_edit_png -- [input.png] [output_dir]`.
//! Without arguments a synthetic image is generated.

use std::path::PathBuf;

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AdapterRegistry;
use oig_core::pipeline::{run_batch, EditConfig, EditTask};

fn main() -> oig_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args.next().map(PathBuf::from);
    let out_dir = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| oig_core::Error::io(&out_dir, e))?;

    let src = match input {
        Some(p) => p,
        None => {
            let p = out_dir.join("oig-synthetic.png");
            let img = ArrayD::from_shape_fn(IxDyn(&[16, 24, 3]), |ix| {
                let (y, x) = (ix[0] as f64, ix[1] as f64);
                (0.5 + 0.4 * ((x / 4.0 + ix[2] as f64).sin() * (y / 5.0).cos())).clamp(0.0, 1.0)
            });
            oig_core::imageio::save_rgb(&p, &img)?;
            p
        }
    };

    let config = EditConfig {
        schedule: oig_core::schedule::DiffusionSchedule::default_with_steps(25)?,
        ..EditConfig::default()
    };
    let plus = EditConfig {
        coherence: true,
        ..config.clone()
    };
    let mut tasks = Vec::new();
    for (name, prompt) in [("dog", "a photo of a dog"), ("cat", "a photo of a cat")] {
        let mut task = EditTask::new(
            &src,
            "a photo of a cat",
            prompt,
            out_dir.join(format!("oig-{name}.png")),
        );
        task.trace = Some(out_dir.join(format!("oig-{name}.trace.csv")));
        tasks.push(task);
    }

    let registry = AdapterRegistry::new();
    for (label, cfg) in [("representation guidance", &config), ("with coherence", &plus)] {
        for (task, res) in tasks.iter().zip(run_batch(&tasks, cfg, &registry)) {
            let out = res?;
            let final_l: f64 = out.trace.steps.last().map_or(0.0, |s| s.l_dist);
            println!(
                "{label}: `{}` -> {} ({} steps, last L_dist {final_l:.4})",
                task.target_prompt,
                task.output.display(),
                out.trace.steps.len()
            );
        }
    }
    Ok(())
}
