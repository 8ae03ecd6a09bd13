//! Command-line pipeline: dataset generation, projection pretraining,
//! training, evaluation, analysis, and attention export.
//!
//! All commands work in `f64`. Config files are JSON with a `version`
//! field; unknown keys are rejected so typos surface immediately. Every
//! run drops a resolved-config snapshot next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{ArgAction, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::align::{contrastive_pretrain, AlignConfig, ProjectionPair};
use crate::error::{Error, Result};
use crate::io::{load_samples, save_dataset, write_array_file};
use crate::metrics::{
    all_ground_truth_spans, baseline_full_duration, baseline_random, export_bias_data,
};
use crate::model::{ForwardOptions, GroundingModel, ModelDims};
use crate::synth::{generate_samples, SynthConfig};
use crate::tensor::Tape;
use crate::trainer::{self, TrainConfig};
use crate::types::{GroundingSample, LossWeights, ModelConfig};

const CONFIG_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "seqground",
    version,
    about = "Temporal grounding of instructional diagram sequences in videos"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Override every seed field of the loaded config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-alignment synthetic dataset.
    GenData {
        /// JSON file: {"version": 1, "synth": {...}}.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (manifest.json + arrays/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively pretrain the feature projections.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file: {"version": 1, "hidden_dim": ..., "align": {...}}.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (projection/ checkpoint + loss log).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grounding model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        /// JSON file: {"version": 1, "model": {...}, "train": {...}, ...}.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (last/, best/, metrics.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Import pretrained projections from this checkpoint directory.
        #[arg(long)]
        projections: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset and write the report JSON.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report file path (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Eval plus baseline reports and a span-bias CSV.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one sample's attention maps as array files plus an index.
    VizAttn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id to visualize.
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `gen-data` config file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    version: u32,
    synth: SynthConfig,
}

fn default_sprf_dim() -> usize {
    8
}

/// `align` config file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignFile {
    version: u32,
    /// Shared embedding width (matches the model's hidden_dim).
    hidden_dim: usize,
    /// Progress-rate feature width appended to both inputs.
    #[serde(default = "default_sprf_dim")]
    sprf_dim: usize,
    /// Projection MLP hidden width; defaults to hidden_dim.
    #[serde(default)]
    proj_hidden: Option<usize>,
    #[serde(default)]
    align: AlignConfig,
}

/// `train` config file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    version: u32,
    model: ModelConfig,
    #[serde(default = "default_sprf_dim")]
    sprf_dim: usize,
    /// Projection MLP hidden width; defaults to model.hidden_dim.
    #[serde(default)]
    proj_hidden: Option<usize>,
    /// Seed for parameter initialization.
    #[serde(default)]
    model_seed: u64,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    loss_weights: LossWeights,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version go to stdout with success; usage errors to
            // stderr with the bad-input code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    init_thread_cap();
    match dispatch(cli.command, cli.seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::default().default_filter_or(default);
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Honor `SEQGROUND_THREADS` once per process.
fn init_thread_cap() {
    static CAP: OnceLock<()> = OnceLock::new();
    CAP.get_or_init(|| {
        let Ok(raw) = std::env::var("SEQGROUND_THREADS") else {
            return;
        };
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("could not cap the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring invalid SEQGROUND_THREADS value {raw:?}"),
        }
    });
}

/// Run one parsed subcommand. Exposed so tests can assert on error values
/// rather than exit codes alone.
pub fn dispatch(command: Command, seed_override: Option<u64>) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out, seed_override),
        Command::Align {
            manifest,
            config,
            out,
        } => align(&manifest, &config, &out, seed_override),
        Command::Train {
            manifest,
            val_manifest,
            config,
            out,
            projections,
        } => train(
            &manifest,
            &val_manifest,
            &config,
            &out,
            projections.as_deref(),
            seed_override,
        ),
        Command::Eval {
            manifest,
            checkpoint,
            report,
        } => eval(&manifest, &checkpoint, &report),
        Command::Analyze {
            manifest,
            checkpoint,
            out,
        } => analyze(&manifest, &checkpoint, &out, seed_override),
        Command::VizAttn {
            manifest,
            checkpoint,
            sample,
            out,
        } => viz_attn(&manifest, &checkpoint, &sample, &out),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != CONFIG_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported config version {version} (expected {CONFIG_VERSION})"),
        ));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Validation(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Validation(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    crate::io::write_atomic(path, text.as_bytes())
}

fn load_dataset(manifest: &Path) -> Result<Vec<GroundingSample<f64>>> {
    require_file(manifest, "manifest")?;
    let samples = load_samples::<f64>(manifest)?;
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    Ok(samples)
}

fn feature_dims(samples: &[GroundingSample<f64>]) -> (usize, usize) {
    (
        samples[0].video.feature_dim(),
        samples[0].diagrams.feature_dim(),
    )
}

fn gen_data(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut file: GenDataFile = read_config(config_path)?;
    check_version(config_path, file.version)?;
    if let Some(seed) = seed_override {
        file.synth.seed = seed;
    }
    write_json(&out.join("resolved-config.json"), &file)?;
    let samples = generate_samples::<f64>(&file.synth)?;
    let manifest_path = save_dataset(out, &samples)?;
    println!(
        "wrote {} samples to {}",
        samples.len(),
        manifest_path.display()
    );
    Ok(())
}

fn align(
    manifest: &Path,
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut file: AlignFile = read_config(config_path)?;
    check_version(config_path, file.version)?;
    if let Some(seed) = seed_override {
        file.align.seed = seed;
    }
    write_json(&out.join("resolved-config.json"), &file)?;

    let samples = load_dataset(manifest)?;
    let (video_dim, diagram_dim) = feature_dims(&samples);
    let proj_hidden = file.proj_hidden.unwrap_or(file.hidden_dim);
    let mut pair = ProjectionPair::<f64>::new(
        video_dim,
        diagram_dim,
        file.sprf_dim,
        proj_hidden,
        file.hidden_dim,
        file.align.temperature,
        file.align.seed,
    )?;
    let losses = contrastive_pretrain(&mut pair, &samples, &file.align)?;

    let extra = serde_json::json!({ "epoch_losses": losses });
    pair.save(&out.join("projection"), &extra)?;
    write_json(&out.join("align-losses.json"), &losses)?;
    println!(
        "pretrained projections for {} epochs (loss {:.6} -> {:.6}), saved to {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        out.join("projection").display()
    );
    Ok(())
}

fn train(
    manifest: &Path,
    val_manifest: &Path,
    config_path: &Path,
    out: &Path,
    projections: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut file: TrainFile = read_config(config_path)?;
    check_version(config_path, file.version)?;
    if let Some(seed) = seed_override {
        file.model_seed = seed;
        file.train.seed = seed;
    }
    write_json(&out.join("resolved-config.json"), &file)?;

    let train_samples = load_dataset(manifest)?;
    let val_samples = load_dataset(val_manifest)?;
    let (video_dim, diagram_dim) = feature_dims(&train_samples);
    let dims = ModelDims {
        video_dim,
        diagram_dim,
        sprf_dim: file.sprf_dim,
        proj_hidden: file.proj_hidden.unwrap_or(file.model.hidden_dim),
    };
    let mut model = GroundingModel::<f64>::new(file.model.clone(), dims, file.model_seed)?;
    if let Some(dir) = projections {
        require_dir(dir, "projection checkpoint")?;
        let (pair, _) = ProjectionPair::<f64>::load(dir)?;
        pair.apply_to_model(&mut model)?;
        log::info!("imported pretrained projections from {}", dir.display());
    }

    let outcome = trainer::train(
        model,
        &train_samples,
        &val_samples,
        &file.train,
        &file.loss_weights,
        Some(out),
    )?;
    let best = &outcome.history[outcome.best_epoch];
    println!(
        "trained {} epochs; best epoch {} (val miou {:.4}); checkpoints in {}",
        outcome.history.len(),
        outcome.best_epoch,
        best.val_miou.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn eval(manifest: &Path, checkpoint: &Path, report_path: &Path) -> Result<()> {
    require_dir(checkpoint, "checkpoint")?;
    let samples = load_dataset(manifest)?;
    let (model, _) = GroundingModel::<f64>::load(checkpoint)?;
    let report = trainer::evaluate_model(&model, &samples)?;
    write_json(report_path, &report)?;

    let snapshot = serde_json::json!({
        "version": CONFIG_VERSION,
        "command": "eval",
        "manifest": manifest,
        "checkpoint": checkpoint,
        "report": report_path,
    });
    write_json(&sibling_config_path(report_path), &snapshot)?;
    println!(
        "evaluated {} samples: miou {:.4}, r@1[0.5] {:.4}",
        samples.len(),
        report.miou,
        report.r_at_1.get("0.5").copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// `report.json` → `report.config.json` in the same directory.
fn sibling_config_path(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".to_string());
    report.with_file_name(format!("{stem}.config.json"))
}

fn analyze(
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    require_dir(checkpoint, "checkpoint")?;
    let samples = load_dataset(manifest)?;
    let (model, _) = GroundingModel::<f64>::load(checkpoint)?;
    let seed = seed_override.unwrap_or(0);

    let snapshot = serde_json::json!({
        "version": CONFIG_VERSION,
        "command": "analyze",
        "manifest": manifest,
        "checkpoint": checkpoint,
        "random_baseline_seed": seed,
    });
    write_json(&out.join("resolved-config.json"), &snapshot)?;

    let report = trainer::evaluate_model(&model, &samples)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("baseline-full-duration.json"),
        &baseline_full_duration(&samples)?,
    )?;
    write_json(
        &out.join("baseline-random.json"),
        &baseline_random(&samples, seed)?,
    )?;
    export_bias_data(&all_ground_truth_spans(&samples), &out.join("bias.csv"))?;
    println!(
        "analysis for {} samples written to {} (miou {:.4})",
        samples.len(),
        out.display(),
        report.miou
    );
    Ok(())
}

/// One exported attention matrix in the `viz-attn` index.
#[derive(Debug, Serialize, Deserialize)]
struct AttentionFileEntry {
    kind: String,
    layer: usize,
    head: usize,
    rows: usize,
    cols: usize,
    path: PathBuf,
}

fn viz_attn(manifest: &Path, checkpoint: &Path, sample_id: &str, out: &Path) -> Result<()> {
    require_dir(checkpoint, "checkpoint")?;
    let samples = load_dataset(manifest)?;
    let sample = samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| {
            Error::Validation(format!(
                "sample {sample_id:?} is not in manifest {}",
                manifest.display()
            ))
        })?;
    let (model, _) = GroundingModel::<f64>::load(checkpoint)?;

    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        &sample.video.clips,
        &sample.diagrams.diagrams,
        ForwardOptions::eval_with_attention(),
    )?;
    let record = pass.attention.expect("attention was requested");

    let mut files = Vec::new();
    for (layer_idx, layer) in record.layers.iter().enumerate() {
        for (kind, heads) in [("self", &layer.self_weights), ("cross", &layer.cross_weights)]
        {
            for (head_idx, weights) in heads.iter().enumerate() {
                let rel = PathBuf::from(format!("{kind}-l{layer_idx}-h{head_idx}.sqga"));
                write_array_file(&out.join(&rel), weights)?;
                files.push(AttentionFileEntry {
                    kind: kind.to_string(),
                    layer: layer_idx,
                    head: head_idx,
                    rows: weights.nrows(),
                    cols: weights.ncols(),
                    path: rel,
                });
            }
        }
    }

    let index = serde_json::json!({
        "sample": sample_id,
        "layers": record.layers.len(),
        "heads": model.config().num_heads,
        "composite_rows": sample.diagrams.diagram_count() * model.config().num_queries,
        "effective_clips": pass.effective_clips,
        "files": files,
    });
    write_json(&out.join("index.json"), &index)?;
    println!(
        "exported {} attention maps for sample {sample_id} to {}",
        files.len(),
        out.display()
    );
    Ok(())
}
