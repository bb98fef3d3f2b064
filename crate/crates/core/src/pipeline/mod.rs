//! End-to-end edits: image in, edited image, trace and cache out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::backends::{cosine_similarity, tokenize, AdapterRegistry, BackendBundle, JointEncoder};
use crate::coherence::sample_oig_plus;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::guidance::{invert_source, sample_oig, PromptPair, SampleOutput, SamplerOptions, StepRecord};
use crate::imageio;
use crate::metrics::{evaluate_entry, ManifestEntry, MetricReport};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Latent;

pub mod cli;
mod config;

pub use config::{BackendSpec, EditConfig, SECTIONS};

/// One source image and the edit to apply to it.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTask {
    pub source_image: PathBuf,
    pub source_prompt: String,
    pub target_prompt: String,
    pub output: PathBuf,
    pub trace: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    /// Background mask for the BD metric; only checked against the source resolution.
    pub mask: Option<PathBuf>,
    pub seed: u64,
}

impl EditTask {
    pub fn new(
        source_image: impl Into<PathBuf>,
        source_prompt: &str,
        target_prompt: &str,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            source_image: source_image.into(),
            source_prompt: source_prompt.to_string(),
            target_prompt: target_prompt.to_string(),
            output: output.into(),
            trace: None,
            cache: None,
            mask: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_prompt.trim().is_empty() || self.target_prompt.trim().is_empty() {
            return Err(Error::InvalidInput(
                "source and target prompts must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step records of a run plus totals.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    /// Schedule timestep index for each record, parallel to `steps`.
    pub timesteps: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub total_ms: f64,
    /// Peak resident memory in kB where the platform reports it.
    pub peak_memory_kb: Option<u64>,
    pub final_cycle: Option<f64>,
}

impl RunTrace {
    fn from_output(out: &SampleOutput, schedule: &DiffusionSchedule, seed: u64, total_ms: f64) -> Result<Self> {
        let timesteps = out
            .steps
            .iter()
            .map(|s| schedule.timestep(s.position).map(|t| t.index))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            timesteps,
            steps: out.steps.clone(),
            total_ms,
            peak_memory_kb: peak_memory_kb(),
            final_cycle: out.final_cycle,
        })
    }

    /// CSV with columns `t,L_dist,L_cycle,grad_norm,ms`; `L_cycle` is empty without coherence.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "L_dist", "L_cycle", "grad_norm", "ms"])?;
        for (t, s) in self.timesteps.iter().zip(&self.steps) {
            w.write_record([
                t.to_string(),
                s.l_dist.to_string(),
                s.l_cycle.map(|v| v.to_string()).unwrap_or_default(),
                s.grad_norm.to_string(),
                s.ms.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
    }
}

fn peak_memory_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Replace the prompt word whose token embedding is most similar to
/// `source_concept` with `target_concept`. Ties go to the earliest word;
/// punctuation and spacing around the word are kept.
pub fn replace_token(
    prompt: &str,
    source_concept: &str,
    target_concept: &str,
    encoder: &dyn JointEncoder,
) -> Result<String> {
    let words = word_spans(prompt);
    if words.is_empty() {
        return Err(Error::InvalidInput("prompt has no tokens".into()));
    }
    let concept = encoder.embed_prompt(source_concept)?;
    let Some(key) = concept.token_embeddings.first() else {
        return Err(Error::InvalidInput("source concept has no tokens".into()));
    };
    let embedded = encoder.embed_prompt(prompt)?;
    if embedded.token_embeddings.len() != words.len() {
        return Err(Error::Backend("encoder tokens do not align with prompt words".into()));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, e) in embedded.token_embeddings.iter().enumerate() {
        let sim = cosine_similarity(e, key);
        if sim > best_sim {
            best = i;
            best_sim = sim;
        }
    }
    let (start, end) = words[best];
    Ok(format!("{}{}{}", &prompt[..start], target_concept, &prompt[end..]))
}

/// Byte spans of the token cores of whitespace-separated words, skipping
/// words with no token (bare punctuation).
fn word_spans(prompt: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut offset = 0;
    for word in prompt.split_inclusive(char::is_whitespace) {
        let trimmed = word.trim_end();
        if !tokenize(trimmed).is_empty() {
            let lead = trimmed.len() - trimmed.trim_start_matches(|c: char| c.is_ascii_punctuation()).len();
            let core = trimmed.trim_matches(|c: char| c.is_ascii_punctuation());
            spans.push((offset + lead, offset + lead + core.len()));
        }
        offset += word.len();
    }
    spans
}

/// What an edit produced. Files are already written when this is returned.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    /// Edited image in `[0, 1]`.
    pub image: Latent,
    pub trace: RunTrace,
    pub sample: SampleOutput,
}

fn load_task_image(task: &EditTask) -> Result<Latent> {
    task.validate()?;
    let image = imageio::load_rgb(&task.source_image)?;
    if let Some(mask) = &task.mask {
        let m = imageio::load_mask(mask)?;
        let (h, w) = imageio::rgb_dims(&image)?;
        if m.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "mask {} is {:?}, source image is {h}x{w}",
                mask.display(),
                m.dim()
            )));
        }
    }
    Ok(image)
}

/// Run one edit on an already-built backend. Nothing is written unless every stage succeeds.
pub fn run_edit_with(task: &EditTask, config: &EditConfig, bundle: &BackendBundle) -> Result<EditOutcome> {
    let start = Instant::now();
    let image = load_task_image(task).map_err(|e| e.at_stage("load"))?;
    let prompts = PromptPair::embed(bundle.encoder.as_ref(), &task.source_prompt, &task.target_prompt)
        .map_err(|e| e.at_stage("prompts"))?;
    let x0 = bundle
        .codec
        .encode(&imageio::to_model_range(&image))
        .map_err(|e| e.at_stage("encode"))?;
    let opts = SamplerOptions {
        distance: config.distance,
        cache_policy: config.cache_policy,
        timing: config.trace_timing,
    };
    log::info!(
        "editing {} ({} steps, coherence {})",
        task.source_image.display(),
        config.schedule.steps(),
        if config.coherence { "on" } else { "off" }
    );
    let sample = if config.coherence {
        sample_oig_plus(&x0, &prompts, &config.schedule, bundle, &config.guidance, &opts)?
    } else {
        sample_oig(&x0, &prompts, &config.schedule, bundle, &config.guidance, &opts)?
    };
    let decoded = bundle.codec.decode(&sample.latent).map_err(|e| e.at_stage("decode"))?;
    let edited = imageio::from_model_range(&decoded);
    if edited.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            expected: image.shape().to_vec(),
            got: edited.shape().to_vec(),
        }
        .at_stage("decode"));
    }
    let total_ms = if config.trace_timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    let trace = RunTrace::from_output(&sample, &config.schedule, task.seed, total_ms)?;

    let png = imageio::encode_png(&edited).map_err(|e| e.at_stage("write"))?;
    let trace_csv = trace.to_csv()?;
    let cache_bytes = match &task.cache {
        Some(_) => {
            let mut buf = Vec::new();
            sample.cache.write_to(&mut buf, &config.schedule, task.seed)?;
            Some(buf)
        }
        None => None,
    };
    write_atomic(&task.output, &png).map_err(|e| e.at_stage("write"))?;
    if let Some(p) = &task.trace {
        write_atomic(p, &trace_csv).map_err(|e| e.at_stage("write"))?;
    }
    if let (Some(p), Some(bytes)) = (&task.cache, cache_bytes) {
        write_atomic(p, &bytes).map_err(|e| e.at_stage("write"))?;
    }
    Ok(EditOutcome {
        image: edited,
        trace,
        sample,
    })
}

/// Build the configured backend for the task's image and run the edit.
pub fn run_edit(task: &EditTask, config: &EditConfig, registry: &AdapterRegistry) -> Result<EditOutcome> {
    let image = load_task_image(task).map_err(|e| e.at_stage("load"))?;
    let bundle = config
        .backend
        .build(image.shape(), registry)
        .map_err(|e| e.at_stage("backend"))?;
    run_edit_with(task, config, &bundle)
}

/// Invert the source image and write only the trajectory cache.
pub fn run_invert(
    image_path: &Path,
    source_prompt: &str,
    cache_path: &Path,
    config: &EditConfig,
    registry: &AdapterRegistry,
) -> Result<crate::ddim::TrajectoryCache> {
    let image = imageio::load_rgb(image_path).map_err(|e| e.at_stage("load"))?;
    let bundle = config
        .backend
        .build(image.shape(), registry)
        .map_err(|e| e.at_stage("backend"))?;
    let prompts =
        PromptPair::embed(bundle.encoder.as_ref(), source_prompt, source_prompt).map_err(|e| e.at_stage("prompts"))?;
    let x0 = bundle
        .codec
        .encode(&imageio::to_model_range(&image))
        .map_err(|e| e.at_stage("encode"))?;
    let (_, cache) = invert_source(
        &x0,
        &prompts,
        &config.schedule,
        &bundle,
        &config.guidance,
        config.cache_policy,
    )
    .map_err(|e| e.at_stage("inversion"))?;
    cache
        .save(cache_path, &config.schedule, config.seed)
        .map_err(|e| e.at_stage("write"))?;
    Ok(cache)
}

/// Run independent edits concurrently. Backends are built once per image
/// shape and shared read-only; results keep the order of `tasks`.
pub fn run_batch(tasks: &[EditTask], config: &EditConfig, registry: &AdapterRegistry) -> Vec<Result<EditOutcome>> {
    let mut bundles: BTreeMap<Vec<usize>, Result<BackendBundle>> = BTreeMap::new();
    let shapes: Vec<Result<Vec<usize>>> = tasks
        .iter()
        .map(|t| load_task_image(t).map(|img| img.shape().to_vec()))
        .collect();
    for shape in shapes.iter().flatten() {
        bundles
            .entry(shape.clone())
            .or_insert_with(|| config.backend.build(shape, registry));
    }
    tasks
        .par_iter()
        .zip(shapes.par_iter())
        .map(|(task, shape)| {
            let shape = shape
                .as_ref()
                .map_err(|e| Error::InvalidInput(e.to_string()).at_stage("load"))?;
            match &bundles[shape] {
                Ok(bundle) => run_edit_with(task, config, bundle),
                Err(e) => Err(Error::Backend(e.to_string()).at_stage("backend")),
            }
        })
        .collect()
}

/// Evaluate a metrics manifest. Image encoders are built from the configured
/// backend once per distinct source resolution.
pub fn run_metrics(entries: &[ManifestEntry], config: &EditConfig, registry: &AdapterRegistry) -> Result<MetricReport> {
    let mut bundles: BTreeMap<Vec<usize>, BackendBundle> = BTreeMap::new();
    let mut shapes = Vec::with_capacity(entries.len());
    for e in entries {
        let shape = imageio::load_rgb(&e.src)
            .map_err(|err| Error::InvalidInput(format!("pair `{}`: {err}", e.pair_id)))?
            .shape()
            .to_vec();
        if !bundles.contains_key(&shape) {
            let bundle = config
                .backend
                .build(&shape, registry)
                .map_err(|e| e.at_stage("backend"))?;
            bundles.insert(shape.clone(), bundle);
        }
        shapes.push(shape);
    }
    let rows = entries
        .par_iter()
        .zip(shapes.par_iter())
        .map(|(e, shape)| {
            evaluate_entry(e, bundles[shape].encoder.as_ref(), &config.structure)
                .map_err(|err| Error::InvalidInput(format!("pair `{}`: {err}", e.pair_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::VocabularyEncoder;
    use ndarray::{Array1, ArrayD, IxDyn};

    #[test]
    fn replaces_exact_token() {
        let enc = VocabularyEncoder::new(16, 0, 1);
        assert_eq!(
            replace_token("a cat sitting on grass", "cat", "dog", &enc).unwrap(),
            "a dog sitting on grass"
        );
        assert_eq!(replace_token("cat", "cat", "dog", &enc).unwrap(), "dog");
        assert_eq!(
            replace_token("A photo of a Cat, outside", "cat", "dog", &enc).unwrap(),
            "A photo of a dog, outside"
        );
        assert!(replace_token(" ,, ", "cat", "dog", &enc).is_err());
    }

    #[test]
    fn replaces_nearest_neighbour() {
        let base = VocabularyEncoder::new(16, 3, 1);
        let cat = base.token_vector("cat");
        let noise = base.token_vector("zzz");
        let kitten = &cat * 0.9 + &noise * 0.3;
        let kitten = &kitten / kitten.dot(&kitten).sqrt();
        let enc = base.with_token("kitten", kitten).unwrap();
        // exhaustive scan confirms kitten is the nearest word to cat
        let words = ["a", "kitten", "on", "a", "sofa"];
        let sims: Vec<f64> = words
            .iter()
            .map(|w| cosine_similarity(&enc.token_vector(w), &cat))
            .collect();
        let argmax = (0..words.len()).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
        assert_eq!(words[argmax], "kitten");
        assert_eq!(
            replace_token("a kitten on a sofa", "cat", "dog", &enc).unwrap(),
            "a dog on a sofa"
        );
    }

    #[test]
    fn ties_go_to_earliest_word() {
        let e = Array1::from(vec![1.0, 0.0, 0.0, 0.0]);
        let enc = VocabularyEncoder::new(4, 0, 1)
            .with_token("left", e.clone())
            .unwrap()
            .with_token("right", e.clone())
            .unwrap()
            .with_token("cat", e)
            .unwrap();
        assert_eq!(replace_token("left right", "cat", "dog", &enc).unwrap(), "dog right");
    }

    #[test]
    fn trace_csv_layout() {
        let trace = RunTrace {
            seed: 1,
            timesteps: vec![980, 960],
            steps: vec![
                StepRecord {
                    position: 2,
                    l_dist: 0.5,
                    l_cycle: None,
                    grad_norm: 0.25,
                    ms: 0.0,
                },
                StepRecord {
                    position: 1,
                    l_dist: 0.0,
                    l_cycle: Some(0.125),
                    grad_norm: 0.0,
                    ms: 0.0,
                },
            ],
            total_ms: 0.0,
            peak_memory_kb: None,
            final_cycle: None,
        };
        let text = String::from_utf8(trace.to_csv().unwrap()).unwrap();
        assert_eq!(
            text,
            "t,L_dist,L_cycle,grad_norm,ms\n980,0.5,,0.25,0\n960,0,0.125,0,0\n"
        );
    }

    fn write_source(dir: &Path) -> PathBuf {
        let img = ArrayD::from_shape_fn(IxDyn(&[6, 5, 3]), |ix| {
            ((ix[0] * 31 + ix[1] * 17 + ix[2] * 5) % 11) as f64 / 10.0
        });
        let p = dir.join("src.png");
        imageio::save_rgb(&p, &img).unwrap();
        p
    }

    fn small_config() -> EditConfig {
        EditConfig {
            schedule: DiffusionSchedule::default_with_steps(8).unwrap(),
            ..EditConfig::default()
        }
    }

    #[test]
    fn edit_writes_outputs_with_input_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_source(dir.path());
        let mut task = EditTask::new(&src, "a cat", "a dog", dir.path().join("out.png"));
        task.trace = Some(dir.path().join("trace.csv"));
        task.cache = Some(dir.path().join("cache.bin"));
        let out = run_edit(&task, &small_config(), &AdapterRegistry::new()).unwrap();
        assert_eq!(out.image.shape(), &[6, 5, 3]);
        assert_eq!(imageio::load_rgb(&task.output).unwrap().shape(), &[6, 5, 3]);
        let trace = std::fs::read_to_string(task.trace.as_ref().unwrap()).unwrap();
        assert_eq!(trace.lines().count(), 1 + 8);
        let (cache, ..) = crate::ddim::TrajectoryCache::load(task.cache.as_ref().unwrap()).unwrap();
        assert_eq!(cache.len(), 8);
    }

    #[test]
    fn failed_edit_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_source(dir.path());
        let mut task = EditTask::new(&src, "a cat", "a dog", dir.path().join("out.png"));
        task.trace = Some(dir.path().join("trace.csv"));
        let mut cfg = small_config();
        cfg.guidance.lambda3 = f64::NAN;
        cfg.coherence = true;
        assert!(run_edit(&task, &cfg, &AdapterRegistry::new()).is_err());
        assert!(!task.output.exists());
        assert!(!dir.path().join("trace.csv").exists());

        let missing = EditTask::new(dir.path().join("nope.png"), "a cat", "a dog", dir.path().join("o.png"));
        let err = run_edit(&missing, &small_config(), &AdapterRegistry::new()).unwrap_err();
        assert!(err.to_string().starts_with("load failed"), "{err}");
    }

    #[test]
    fn mask_must_match_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_source(dir.path());
        let mask = dir.path().join("mask.png");
        image::GrayImage::new(3, 3).save(&mask).unwrap();
        let mut task = EditTask::new(&src, "a cat", "a dog", dir.path().join("out.png"));
        task.mask = Some(mask);
        assert!(run_edit(&task, &small_config(), &AdapterRegistry::new()).is_err());
    }

    #[test]
    fn batch_matches_sequential_runs() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_source(dir.path());
        let tasks: Vec<EditTask> = (0..3)
            .map(|i| {
                EditTask::new(
                    &src,
                    "a cat",
                    if i == 1 { "a cat" } else { "a dog" },
                    dir.path().join(format!("o{i}.png")),
                )
            })
            .collect();
        let cfg = small_config();
        let batch = run_batch(&tasks, &cfg, &AdapterRegistry::new());
        for (task, res) in tasks.iter().zip(batch) {
            let single = run_edit(task, &cfg, &AdapterRegistry::new()).unwrap();
            assert_eq!(res.unwrap().sample.latent, single.sample.latent);
        }
    }
}
