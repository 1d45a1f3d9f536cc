//! The outer training loop: batching, logging, periodic validation and
//! best-k checkpoint retention.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{batch_indices, evaluate_losses, lr_schedule, save_checkpoint, train_step, TrainState};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{LossTerms, TrainingExample, UniMs};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossTerms,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Validation losses by step.
    pub evals: Vec<(usize, LossTerms)>,
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Trains from `state.step + 1` through `until` (default: the configured
/// total). With `out`, appends `train_log.jsonl`, keeps the best-k
/// validation checkpoints under `checkpoints/` and the latest under `last/`.
pub fn train(
    model: &mut UniMs,
    state: &mut TrainState,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    until: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let until = until.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log: Option<File> = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
            )
        }
        None => None,
    };
    let val = if val_set.is_empty() { train_set } else { val_set };
    let mut outcome = TrainOutcome::default();

    while state.step < until {
        let step = state.step + 1;
        let idx = batch_indices(train_set.len(), cfg.batch_size, model.config.seed, step);
        let batch: Vec<TrainingExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr)?;
        let losses = train_step(model, state, &batch, cfg)?;
        let rec = StepRecord { step, lr, losses };
        if let (Some(f), Some(dir)) = (log.as_mut(), out) {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(dir.join("train_log.jsonl"), e))?;
        }
        if step % 50 == 0 || step == 1 {
            log::info!(
                "step {step}: total {:.4} (kd {:.4}, ext {:.4}, abs {:.4}) lr {lr:.2e}",
                losses.total,
                losses.kd,
                losses.ext,
                losses.abs
            );
        }
        outcome.records.push(rec);

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let v = evaluate_losses(model, val)?;
            log::info!("step {step}: validation loss {:.4}", v.total);
            outcome.evals.push((step, v));
            let (kept, evicted) = state.register(step, v.total, cfg.keep_best);
            if let Some(dir) = out {
                if kept {
                    save_checkpoint(model, state, cfg, &checkpoint_dir(dir, step))?;
                }
                if let Some(old) = evicted.filter(|&s| s != step) {
                    let p = checkpoint_dir(dir, old);
                    if p.exists() {
                        fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(model, state, cfg, &dir.join("last"))?;
    }
    Ok(outcome)
}
