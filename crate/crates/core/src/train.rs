//! The epoch loop: shuffled minibatches, AdamW steps, per-epoch holdout
//! evaluation and best-checkpoint retention.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{CctConfig, ConfigError};
use crate::data::{batches, holdout_split, one_hot, DataError, DatasetBundle, Split};
use crate::error::TensorError;
use crate::loss::label_smoothed_ce;
use crate::model::{argmax_rows, forward, predict_logits, ModelParams};
use crate::nn::DropState;
use crate::optim::AdamW;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const TRAINLOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

/// Fraction of the training split held out for model selection.
pub const HOLDOUT_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    Empty,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: u32, batch: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("trainlog line {line}: {reason}")]
    BadLog { line: usize, reason: String },
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAINLOG_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_seconds
            )
            .expect("write to string");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TRAINLOG_HEADER => {}
            _ => return Err(TrainError::BadLog { line: 1, reason: format!("expected header `{TRAINLOG_HEADER}`") }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| TrainError::BadLog { line: i + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
            rows.push(EpochRow {
                epoch: f[0].trim().parse().map_err(|_| bad(format!("bad epoch `{}`", f[0])))?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_loss: num(f[3])?,
                val_acc: num(f[4])?,
                wall_seconds: num(f[5])?,
            });
        }
        Ok(TrainLog { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }

    /// Highest validation accuracy, earliest epoch on ties.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows.iter().fold(None, |best: Option<&EpochRow>, r| match best {
            Some(b) if b.val_acc >= r.val_acc => Some(b),
            _ => Some(r),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Random crop and flip on training batches.
    pub augment: bool,
    /// Record elapsed seconds in the log. Off (the default) writes 0 so
    /// that logs are byte-reproducible.
    pub record_wall_time: bool,
    /// Chunk size for evaluation forward passes.
    pub eval_batch: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { augment: true, record_wall_time: false, eval_batch: 256, holdout_fraction: HOLDOUT_FRACTION }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Loss (label-smoothed, as in training) and top-1 accuracy, eval mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Eval-mode loss and accuracy of `params` on a split.
pub fn evaluate_split(
    params: &ModelParams<f32>,
    cfg: &CctConfig,
    split: &Split,
    eval_batch: usize,
) -> Result<Evaluation, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let logits = predict_logits(params, cfg, &split.images, eval_batch)?;
    let onehot = one_hot(&split.labels, cfg.num_classes)?;
    let tape = Tape::new();
    let loss = label_smoothed_ce(tape.constant(logits.clone()), &onehot, cfg.label_smoothing)?.value().data()[0];
    let correct = argmax_rows(&logits).iter().zip(&split.labels).filter(|(p, &l)| **p == l as usize).count();
    Ok(Evaluation { loss: loss as f64, accuracy: correct as f64 / split.len() as f64 })
}

/// Train on the official train split minus a seeded holdout used for
/// model selection.
pub fn train(
    cfg: &CctConfig,
    bundle: &DatasetBundle,
    opts: &TrainOptions,
    on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    if bundle.train.is_empty() {
        return Err(TrainError::Empty);
    }
    let (fit, val) = holdout_split(&bundle.train, opts.holdout_fraction, cfg.seed)?;
    train_on_splits(cfg, &fit, &val, opts, on_epoch)
}

fn non_finite(epoch: u32, batch: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op } => {
            TrainError::NonFinite { epoch, batch, detail: format!("operation `{op}` produced a non-finite value") }
        }
        other => TrainError::Tensor(other),
    }
}

/// Train on `fit`, selecting the epoch with the highest accuracy on `val`.
pub fn train_on_splits(
    cfg: &CctConfig,
    fit: &Split,
    val: &Split,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if fit.is_empty() {
        return Err(TrainError::Empty);
    }
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let started = Instant::now();
    let mut params = ModelParams::<f32>::init(cfg, derive_seed(cfg.seed, &[1]))?;
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let batch_seed = derive_seed(cfg.seed, &[2]);
    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs as u32 {
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (bi, batch) in batches(fit, cfg.batch_size, batch_seed, epoch as u64, opts.augment)?.enumerate() {
            let err = non_finite(epoch, bi);
            let tape = Tape::new();
            let bound = params.bind(&tape, true);
            let mut drop = DropState::train(derive_seed(cfg.seed, &[3, epoch as u64, bi as u64]));
            let logits = forward(tape.constant(batch.images), &bound, cfg, &mut drop).map_err(&err)?;
            let loss = label_smoothed_ce(logits, &batch.onehot, cfg.label_smoothing).map_err(&err)?;
            let loss_value = loss.value().data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: format!("loss = {loss_value}") });
            }
            let grads = tape.backward(loss).map_err(&err)?;
            let g: Vec<Tensor<f32>> = bound.iter().map(|(_, v)| grads.wrt(v)).collect();
            if let Some((name, _)) = bound.iter().zip(&g).find(|(_, t)| !t.all_finite()).map(|(p, _)| p) {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: format!("gradient of `{name}`") });
            }
            opt.step(&mut params, &g)?;

            let n = batch.labels.len();
            loss_sum += loss_value as f64 * n as f64;
            correct += argmax_rows(&logits.value()).iter().zip(&batch.labels).filter(|(p, &l)| **p == l as usize).count();
        }

        let eval = evaluate_split(&params, cfg, val, opts.eval_batch)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / fit.len() as f64,
            train_acc: correct as f64 / fit.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
            wall_seconds: if opts.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        if best.as_ref().is_none_or(|b| row.val_acc as f32 > b.best_val_accuracy) {
            best = Some(Checkpoint {
                config: cfg.clone(),
                params: params.clone(),
                best_val_accuracy: row.val_acc as f32,
                epoch,
            });
        }
        on_epoch(&row);
        log.rows.push(row);
    }

    let checkpoint = match best {
        Some(ck) => ck,
        // Zero epochs: the untrained model, evaluated once.
        None => {
            let eval = evaluate_split(&params, cfg, val, opts.eval_batch)?;
            Checkpoint { config: cfg.clone(), params, best_val_accuracy: eval.accuracy as f32, epoch: 0 }
        }
    };
    Ok(TrainOutcome { checkpoint, log })
}
