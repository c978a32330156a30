//! Training loop: frozen text embeddings, adapter + backbone optimization,
//! periodic validation with best-model retention, and append-only JSONL
//! logging. Fully deterministic for a given configuration and seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_cases, CaseData};
use crate::error::{Error, Result};
use crate::infer::mean_val_dsc;
use crate::losses::{sup_loss, LossReport};
use crate::manifest::Manifest;
use crate::model::{stack_patches, SegModel};
use crate::nn::optim::AdamW;
use crate::nn::{Module, Tensor};
use crate::preproc::sample_patch;
use crate::rng;

/// Paths and headline numbers of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation score (equals the final one when
    /// the run never validated on a non-empty set).
    pub best_checkpoint: PathBuf,
    /// Checkpoint after the last epoch.
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_val_dsc: f64,
    pub best_epoch: u32,
    pub steps: usize,
    pub final_loss: f64,
}

fn ensure_finite(loss: f64, step: usize, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "non-finite loss {loss} at step {step} (epoch {epoch}); \
             lower the learning rate or check the input data"
        )))
    }
}

/// One optimization step on a stacked batch. Returns the loss breakdown.
pub fn train_step(
    model: &mut SegModel,
    opt: &mut AdamW,
    input: &Tensor,
    labels: &[crate::volume::Grid3<u8>],
    masks: &[crate::preproc::SupervisionMask],
    text: &Tensor,
) -> Result<LossReport> {
    let probs = model.forward(input, text)?;
    let (report, grad) = sup_loss(&probs, labels, masks)?;
    model.zero_grad();
    model.backward(&grad);
    opt.step(model);
    Ok(report)
}

fn step_record(step: usize, epoch: usize, report: &LossReport) -> String {
    let dice: std::collections::BTreeMap<String, f64> = report
        .per_class
        .iter()
        .map(|(k, (d, _))| (k.to_string(), *d))
        .collect();
    let ce: std::collections::BTreeMap<String, f64> = report
        .per_class
        .iter()
        .map(|(k, (_, c))| (k.to_string(), *c))
        .collect();
    serde_json::json!({
        "record": "step",
        "step": step,
        "epoch": epoch,
        "loss": report.total,
        "dice": dice,
        "ce": ce,
    })
    .to_string()
}

/// Runs the full training procedure and writes `final.ckpt`, `best.ckpt`,
/// `train_log.jsonl`, and a copy of the configuration into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg
        .manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let [train_m, val_m, _test_m] = manifest.split(cfg.split, cfg.seed)?;
    if train_m.is_empty() {
        return Err(Error::invalid(
            "training split is empty; provide more cases or adjust `split`",
        ));
    }
    let train_cases = load_cases(&train_m, &root, cfg)?;
    let val_cases = load_cases(&val_m, &root, cfg)?;

    // Text embeddings are computed once and never receive gradients.
    let text = cfg.embedder()?.embed(&cfg.prompts()?)?;

    let spec = cfg.model_spec()?;
    let mut model = SegModel::new(&spec, &mut rng::stream(cfg.seed, "model.init", 0))?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    cfg.save(&out_dir.join("config.toml"))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_line = |line: String| -> Result<()> {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };

    let config_hash = cfg.hash();
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0u32;
    let mut step = 0usize;
    let mut final_loss = f64::NAN;

    // `cfg.lr` is the *initial* rate; it decays polynomially towards zero so
    // late epochs settle instead of oscillating around the optimum.
    let steps_per_epoch = train_cases.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "train.order", epoch as u64));

        for chunk in order.chunks(cfg.batch_size) {
            let patches = chunk
                .iter()
                .map(|&ci| {
                    let case: &CaseData = &train_cases[ci];
                    let key = format!("{epoch}/{ci}");
                    let mut r = rng::stream_keyed(cfg.seed, "train.patch", key.as_bytes());
                    sample_patch(
                        &case.channels,
                        &case.labels,
                        &case.mask,
                        cfg.patch_size,
                        cfg.fg_bias,
                        &mut r,
                        &case.id,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (input, labels, masks) = stack_patches(&patches)?;
            opt.lr = cfg.lr * (1.0 - step as f64 / total_steps as f64).powf(0.9);
            let report = train_step(&mut model, &mut opt, &input, &labels, &masks, &text)?;
            step += 1;
            ensure_finite(report.total, step, epoch)?;
            final_loss = report.total;
            log_line(step_record(step, epoch, &report))?;
        }

        if epoch % cfg.validate_every == 0 || epoch == cfg.epochs {
            if !val_cases.is_empty() {
                let vd = mean_val_dsc(&mut model, &text, &val_cases, cfg)?;
                let improved = vd > best_val;
                log_line(
                    serde_json::json!({
                        "record": "val",
                        "epoch": epoch,
                        "mean_dsc": vd,
                        "improved": improved,
                    })
                    .to_string(),
                )?;
                if improved {
                    best_val = vd;
                    best_epoch = epoch as u32;
                    Checkpoint::capture(&mut model, &opt, epoch as u32, vd, config_hash)
                        .save(&best_path)?;
                }
            }
        }
    }

    let recorded_best = if best_val.is_finite() { best_val } else { -1.0 };
    Checkpoint::capture(&mut model, &opt, cfg.epochs as u32, recorded_best, config_hash)
        .save(&final_path)?;
    if !best_path.exists() {
        // Never validated (empty val split): the final model is the best one.
        fs::copy(&final_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }

    log_line(
        serde_json::json!({
            "record": "done",
            "epochs": cfg.epochs,
            "steps": step,
            "best_val_dsc": recorded_best,
            "best_epoch": best_epoch,
        })
        .to_string(),
    )?;

    Ok(TrainOutcome {
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        log_path,
        best_val_dsc: recorded_best,
        best_epoch,
        steps: step,
        final_loss,
    })
}
