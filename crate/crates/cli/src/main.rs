//! `avseg` — command-line surface for phantom data generation,
//! preprocessing, training, evaluation, and prediction.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avseg_core::checkpoint::{file_sha256, Checkpoint};
use avseg_core::config::RunConfig;
use avseg_core::dataset::{load_cases, prepare_channels};
use avseg_core::infer::{evaluate, predict_label_volume};
use avseg_core::manifest::Manifest;
use avseg_core::model::SegModel;
use avseg_core::phantom::{write_phantom_dataset, PhantomConfig};
use avseg_core::train::train;
use avseg_core::{nifti, ChannelTag, Volume};

#[derive(Parser)]
#[command(
    name = "avseg",
    version,
    about = "Language-guided artery/vein segmentation for 3D CT volumes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic vascular phantom dataset with a manifest.
    Phantom(PhantomArgs),
    /// Export preprocessed channels and labels for every manifest case.
    Preprocess(PreprocessArgs),
    /// Train a model from a configuration file.
    Train(ConfigArg),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Predict labels for a single volume.
    Predict(PredictArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory (receives vol/, lab/, manifest.tsv).
    #[arg(long)]
    out: PathBuf,
    /// Number of cases to generate.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// How many of them keep complete labels; the rest alternate
    /// half-left / half-right annotation.
    #[arg(long)]
    full: Option<usize>,
    /// Cubic edge length of each volume in voxels.
    #[arg(long, default_value_t = 48)]
    shape: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory (defaults to `<out_dir>/prep`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint to evaluate (defaults to `<out_dir>/best.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which split of the manifest to score.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint to load (defaults to `<out_dir>/best.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input CT volume (.nii.gz, raw HU).
    #[arg(long)]
    volume: PathBuf,
    /// Output label map path (.nii.gz).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

/// Restores the model a checkpoint describes and cross-checks it against the
/// active configuration.
fn restore(cfg: &RunConfig, path: &PathBuf) -> Result<(SegModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let want = cfg.model_spec()?;
    if ckpt.spec != want {
        bail!(
            "checkpoint {} was trained with a different architecture \
             (e.g. {} input channels vs {} configured); adjust the config",
            path.display(),
            ckpt.spec.in_channels,
            want.in_channels,
        );
    }
    if ckpt.config_hash != cfg.hash() {
        eprintln!(
            "note: checkpoint {} was produced by a different configuration",
            path.display()
        );
    }
    Ok((ckpt.restore_model()?, ckpt))
}

fn default_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.resolved_out_dir().join("best.ckpt"))
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let full = a.full.unwrap_or(a.count);
    let pc = PhantomConfig {
        shape: [a.shape; 3],
        ..PhantomConfig::default()
    };
    let manifest = write_phantom_dataset(&a.out, &pc, a.count, full, a.seed)?;
    println!(
        "wrote {} cases ({} fully labeled) under {}",
        manifest.len(),
        full,
        a.out.display()
    );
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let out = a.out.unwrap_or_else(|| cfg.resolved_out_dir().join("prep"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg
        .manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let cases = load_cases(&manifest, &root, &cfg)?;
    for case in &cases {
        let spacing = case.labels.spacing;
        let origin = case.labels.origin;
        for (i, chan) in case.channels.iter().enumerate() {
            let tag = if i == 0 { ChannelTag::Normalized } else { ChannelTag::HessianEig };
            let vol = Volume::new(chan.clone(), spacing, origin, tag)?;
            nifti::write_volume(out.join(format!("{}_ch{i}.nii.gz", case.id)), &vol)?;
        }
        nifti::write_labels(out.join(format!("{}_labels.nii.gz", case.id)), &case.labels)?;
    }
    println!("preprocessed {} cases into {}", cases.len(), out.display());
    Ok(())
}

fn cmd_train(a: ConfigArg) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let out_dir = cfg.resolved_out_dir();
    let outcome = train(&cfg, &out_dir)?;
    println!(
        "trained {} steps; best val DSC {:.2} (epoch {}); final loss {:.4}",
        outcome.steps, outcome.best_val_dsc, outcome.best_epoch, outcome.final_loss
    );
    println!("checkpoints: {}", out_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let ckpt_path = default_checkpoint(&cfg, a.checkpoint);
    let (mut model, _ckpt) = restore(&cfg, &ckpt_path)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg
        .manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let part = match a.split.as_str() {
        "all" => manifest,
        name => {
            let [tr, va, te] = manifest.split(cfg.split, cfg.seed)?;
            match name {
                "train" => tr,
                "val" => va,
                _ => te,
            }
        }
    };
    if part.is_empty() {
        bail!("split '{}' holds no cases", a.split);
    }
    let cases = load_cases(&part, &root, &cfg)?;
    let text = cfg.embedder()?.embed(&cfg.prompts()?)?;
    let ckpt_id = file_sha256(&ckpt_path)?;
    let report = evaluate(&mut model, &text, &cases, &cfg, &ckpt_id)?;

    let out_dir = cfg.resolved_out_dir();
    fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join(format!("metrics_{}.jsonl", a.split));
    fs::write(&report_path, report.to_jsonl())?;
    for (structure, m) in &report.summary {
        println!(
            "{structure:8} dsc {:6.2}  jaccard {:6.2}  nsd {:5.3}  hd95 {:6.2}",
            m.dsc, m.jaccard, m.nsd, m.hd95
        );
    }
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let ckpt_path = default_checkpoint(&cfg, a.checkpoint);
    let (mut model, _ckpt) = restore(&cfg, &ckpt_path)?;
    let vol = nifti::read_volume(&a.volume)?;
    let channels = prepare_channels(&vol, &cfg)?;
    let text = cfg.embedder()?.embed(&cfg.prompts()?)?;
    let labels =
        predict_label_volume(&mut model, &text, &channels, vol.spacing, vol.origin, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    nifti::write_labels(&a.out, &labels)?;
    let fg = labels.data.data().iter().filter(|&&v| v > 0).count();
    println!(
        "wrote {} ({} foreground voxels of {})",
        a.out.display(),
        fg,
        labels.data.len()
    );
    Ok(())
}
