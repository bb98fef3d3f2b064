//! Command-line front end for the `oig` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{run_edit, run_invert, run_metrics, EditConfig, EditTask};
use crate::backends::AdapterRegistry;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::metrics::read_manifest;

#[derive(Debug, Parser)]
#[command(name = "oig", version, about = "Guided DDIM image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Edit an image with representation guidance.
    Edit(EditArgs),
    /// Edit with representation and coherence guidance.
    EditPlus(EditArgs),
    /// Invert an image and write its trajectory cache.
    Invert(InvertArgs),
    /// Compute CS/SD/BD over a manifest of image pairs.
    Metrics(MetricsArgs),
    /// Run the analytic-backend property checks.
    Selftest,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Config file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set backend.variance=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
    /// Number of sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GuidanceArgs {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    beta_f: Option<f64>,
    #[arg(long)]
    beta_p: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    inversion_cfg_scale: Option<f64>,
    /// Max gradient norm, or `none`.
    #[arg(long)]
    gradient_clip: Option<String>,
    /// `skip-prev-term` or `use-current`.
    #[arg(long)]
    first_step_policy: Option<String>,
    /// `analytic`, `finite-difference` or `auto`.
    #[arg(long)]
    gradient_mode: Option<String>,
}

#[derive(Debug, Args)]
struct EditArgs {
    /// Source image (PNG).
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    src_prompt: String,
    #[arg(long)]
    tgt_prompt: String,
    /// Edited image; defaults to `<src stem>.edited.png` next to the source.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace CSV; defaults to `<src stem>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the source trajectory cache here.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Background mask, checked against the source resolution.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    src_prompt: String,
    /// Cache file; defaults to `<src stem>.cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    inversion_cfg_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// CSV with `pair_id,src,tgt,prompt,mask` and optional `task` columns.
    #[arg(long)]
    manifest: PathBuf,
    /// Report CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl CommonArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        if let Some(n) = self.steps {
            out.push(("schedule.grid_steps".into(), n.to_string()));
        }
        if let Some(s) = self.seed {
            out.push(("io.seed".into(), s.to_string()));
        }
        out
    }
}

impl GuidanceArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let numeric = [
            ("guidance.lambda1", self.lambda1),
            ("guidance.lambda2", self.lambda2),
            ("guidance.beta_f", self.beta_f),
            ("guidance.beta_p", self.beta_p),
            ("coherence.lambda3", self.lambda3),
            ("coherence.lambda4", self.lambda4),
            ("guidance.cfg_scale", self.cfg_scale),
            ("guidance.inversion_cfg_scale", self.inversion_cfg_scale),
        ];
        let text = [
            ("guidance.gradient_clip", &self.gradient_clip),
            ("guidance.first_step_policy", &self.first_step_policy),
            ("guidance.gradient_mode", &self.gradient_mode),
        ];
        numeric
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string())))
            .chain(
                text.into_iter()
                    .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))),
            )
            .collect()
    }
}

/// `dir/stem.suffix` next to `src`.
fn sibling(src: &Path, suffix: &str) -> PathBuf {
    let stem = src
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    src.with_file_name(format!("{stem}.{suffix}"))
}

fn edit(args: EditArgs, coherence: bool, registry: &AdapterRegistry) -> Result<()> {
    let mut overrides = args.common.overrides();
    overrides.extend(args.guidance.overrides());
    if coherence {
        overrides.push(("coherence.enabled".into(), "true".into()));
    }
    let config = EditConfig::load(args.common.config.as_deref(), &overrides)?;
    let task = EditTask {
        output: args.out.clone().unwrap_or_else(|| sibling(&args.src, "edited.png")),
        trace: Some(args.trace.clone().unwrap_or_else(|| sibling(&args.src, "trace.csv"))),
        cache: args.cache,
        mask: args.mask,
        seed: config.seed,
        source_image: args.src,
        source_prompt: args.src_prompt,
        target_prompt: args.tgt_prompt,
    };
    let out = run_edit(&task, &config, registry)?;
    println!("wrote {}", task.output.display());
    if let Some(t) = &task.trace {
        println!("wrote {}", t.display());
    }
    if let Some(c) = out.trace.final_cycle {
        println!("final cycle distance {c}");
    }
    Ok(())
}

fn invert(args: InvertArgs, registry: &AdapterRegistry) -> Result<()> {
    let mut overrides = args.common.overrides();
    if let Some(w) = args.inversion_cfg_scale {
        overrides.push(("guidance.inversion_cfg_scale".into(), w.to_string()));
    }
    let config = EditConfig::load(args.common.config.as_deref(), &overrides)?;
    let cache_path = args.cache.unwrap_or_else(|| sibling(&args.src, "cache"));
    let cache = run_invert(&args.src, &args.src_prompt, &cache_path, &config, registry)?;
    println!("wrote {} ({} records)", cache_path.display(), cache.len());
    Ok(())
}

fn metrics(args: MetricsArgs, registry: &AdapterRegistry) -> Result<()> {
    let config = EditConfig::load(args.config.as_deref(), &args.set)?;
    let entries = read_manifest(&args.manifest)?;
    let report = run_metrics(&entries, &config, registry)?;
    let csv = report.to_csv()?;
    match &args.out {
        Some(p) => {
            write_atomic(p, &csv)?;
            println!("wrote {} ({} pairs)", p.display(), report.rows.len());
        }
        None => std::io::stdout()
            .write_all(&csv)
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn selftest() -> i32 {
    let results = crate::selftest::run();
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("pass  {}", r.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {}: {msg}", r.name);
            }
        }
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        0
    } else {
        2
    }
}

/// Parse `argv` (including the program name), run the subcommand and return
/// the exit code: 0 on success, 1 on usage, config or I/O errors, 2 when a
/// numeric guard aborts a run or a selftest check fails.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    cli_main_with(argv, &AdapterRegistry::new())
}

/// [`cli_main`] with extra pretrained adapters available to `backend.kind=pretrained`.
pub fn cli_main_with<I, T>(argv: I, registry: &AdapterRegistry) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Edit(a) => edit(a, false, registry),
        Command::EditPlus(a) => edit(a, true, registry),
        Command::Invert(a) => invert(a, registry),
        Command::Metrics(a) => metrics(a, registry),
        Command::Selftest => return selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}
