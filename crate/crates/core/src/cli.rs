//! Command-line front end. Every command prints machine-readable output;
//! failures go to stderr as `{"error": kind, "message": ...}`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::TrainConfig;
use crate::data::{load_manifest, parse_sweep, scan_directory, Degradation, Manifest};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_embeddings, predict, robustness_sweep};
use crate::train::{load_checkpoint, train};

/// Env var naming a cache directory searched for relative checkpoint paths.
pub const CACHE_ENV: &str = "DEECLIP_CACHE";

#[derive(Debug, Parser)]
#[command(name = "deeclip", version, about = "Detect AI-generated images with a CLIP-ViT backbone, LoRA and layer fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config; writes checkpoints and a JSONL loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest and write an EvalReport.
    Eval(EvalArgs),
    /// Evaluate under a list of JPEG and blur settings.
    Robustness(RobustnessArgs),
    /// Score a single image.
    Predict(PredictArgs),
    /// Write per-image embeddings to CSV.
    ExportEmbeddings(ExportArgs),
    /// Print the parameter census of a checkpoint.
    Census(CensusArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL manifest, or a directory with real/ and fake/ leaves.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Degradation applied before preprocessing, e.g. `jpeg:80` or `blur:2`.
    #[arg(long, value_name = "SPEC")]
    pub degrade: Option<String>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL manifest, or a directory with real/ and fake/ leaves.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Settings such as `jpeg:80,70,60`, `blur:1,2,3` or `none` (repeatable).
    #[arg(long, value_name = "SPEC", required = true)]
    pub sweep: Vec<String>,
    /// Report path (JSON); printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image file.
    #[arg(long)]
    pub image: PathBuf,
    /// Degradation applied before preprocessing.
    #[arg(long, value_name = "SPEC")]
    pub degrade: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL manifest, or a directory with real/ and fake/ leaves.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CensusArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

pub fn error_json(e: &Error) -> serde_json::Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::MissingFiles { paths, count } = e {
        v["missing"] = json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>());
        v["count"] = json!(count);
    }
    v
}

/// Runs one command and returns what it prints on success.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => {
            let model = load_model(&a.ckpt)?;
            let manifest = read_manifest(&a.manifest)?;
            let deg = parse_degradation(a.degrade.as_deref())?;
            let report = evaluate(&model, &manifest, deg)?;
            let text = report.to_json()?;
            write_output(&a.out, &text)?;
            Ok(serde_json::to_string(&json!({ "out": a.out, "mAcc": report.macc }))?)
        }
        Command::Robustness(a) => {
            let model = load_model(&a.ckpt)?;
            let manifest = read_manifest(&a.manifest)?;
            let mut sweeps = Vec::new();
            for s in &a.sweep {
                sweeps.extend(parse_sweep(s)?);
            }
            let report = robustness_sweep(&model, &manifest, &sweeps)?;
            let text = serde_json::to_string_pretty(&report)?;
            match a.out {
                Some(out) => {
                    write_output(&out, &text)?;
                    Ok(serde_json::to_string(&json!({
                        "out": out,
                        "average": report.average.as_ref().map(|a| a.overall),
                    }))?)
                }
                None => Ok(text),
            }
        }
        Command::Predict(a) => {
            let model = load_model(&a.ckpt)?;
            let deg = parse_degradation(a.degrade.as_deref())?;
            let p = predict(&model, &a.image, deg)?;
            Ok(serde_json::to_string(&p)?)
        }
        Command::ExportEmbeddings(a) => {
            let model = load_model(&a.ckpt)?;
            let manifest = read_manifest(&a.manifest)?;
            let rows = export_embeddings(&model, &manifest, &a.out)?;
            Ok(serde_json::to_string(&json!({ "out": a.out, "rows": rows.len() }))?)
        }
        Command::Census(a) => {
            let model = load_model(&a.ckpt)?;
            let census = model.census();
            if a.json {
                Ok(serde_json::to_string_pretty(&census)?)
            } else {
                Ok(census.to_table())
            }
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<String> {
    let mut cfg = TrainConfig::load(&a.config, &a.overrides)?;
    if cfg.train.checkpoint_dir.is_none() {
        let base = a.config.parent().unwrap_or(Path::new("."));
        cfg.train.checkpoint_dir = Some(base.join("checkpoints"));
    }
    if let Some(p) = cfg.backbone.checkpoint.take() {
        cfg.backbone.checkpoint = Some(resolve_cached(&p));
    }
    let manifest_path = cfg
        .train
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("train.manifest is required".into()))?;
    let manifest = read_manifest(&manifest_path)?;
    let ckpt = train(&cfg, &manifest)?;
    let dir = cfg.train.checkpoint_dir.expect("set above");
    Ok(serde_json::to_string(&json!({
        "checkpoint": dir.join("final.ckpt"),
        "steps": ckpt.step,
    }))?)
}

/// A relative path that does not exist is looked up under `$DEECLIP_CACHE`.
pub fn resolve_cached(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            let candidate = Path::new(&cache).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<Detector> {
    let mut ckpt = load_checkpoint(resolve_cached(path))?;
    if let Some(p) = ckpt.config.backbone.checkpoint.take() {
        ckpt.config.backbone.checkpoint = Some(resolve_cached(&p));
    }
    Detector::from_checkpoint(&ckpt)
}

/// JSONL file, or a directory scanned for real/fake leaves.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if path.is_dir() {
        scan_directory(path)
    } else {
        load_manifest(path)
    }
}

fn parse_degradation(spec: Option<&str>) -> Result<Degradation> {
    match spec {
        None => Ok(Degradation::None),
        Some(s) => {
            let d: Degradation = s.parse()?;
            d.validate()?;
            Ok(d)
        }
    }
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::data(path, e))
}
