//! Mean-squared-error training loop with seeded shuffling, validation
//! tracking, best-checkpoint selection and the missing-level regime.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{HeadMode, ModelConfig};
use crate::data::StDataset;
use crate::encoder::{m2ost_forward, ForwardOpts, RunMode};
use crate::error::Error;
use crate::eval::{pcc, rmse};
use crate::params::{adam_step, AdamState, ParamStore};
use crate::rng::{stream_from_parts, stream_id, CounterRng};
use crate::tape::{DiffArray, Precision, Tape};
use crate::Result;

/// Optimization hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs, for bounded runs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Fraction of samples that get one pyramid level masked out.
    pub missing_level_fraction: f64,
    /// Validation cadence in optimizer steps.
    pub eval_every: usize,
    /// Training arithmetic width; verification runs switch to 64-bit.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 96,
            epochs: 100,
            max_steps: None,
            seed: 42,
            missing_level_fraction: 0.0,
            eval_every: 50,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_level_fraction) {
            return Err(Error::Config(format!(
                "missing_level_fraction {} outside [0, 1]",
                self.missing_level_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One append-only training-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_mse: f64,
    pub val_pcc: f64,
    pub val_rmse: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<LogRow>,
    /// Snapshot with the best validation correlation.
    pub best: ParamStore,
    pub best_val_pcc: f64,
    pub steps_run: u64,
}

/// Mean squared error between a prediction on the tape and a constant target.
pub fn mse_loss(pred: &DiffArray, target: &[f64], tape: &Tape) -> Result<DiffArray> {
    let shape = pred.shape();
    let len: usize = shape.iter().product();
    if len != target.len() {
        return Err(Error::Input(format!(
            "mse: prediction has {len} entries, target {}",
            target.len()
        )));
    }
    let t = tape.constant(target.to_vec(), &shape)?;
    let diff = pred.sub(&t)?;
    diff.mul(&diff)?.mean_all()
}

/// Train with every level present.
pub fn fit(
    store: &mut ParamStore,
    dataset: &StDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    fit_impl(store, dataset, train_idx, val_idx, model, config, None)
}

/// Train with a fraction of samples missing one uniformly chosen level.
///
/// The masked level behaves as an all-black image, its cross-level
/// contributions are detached during back-propagation, and predictions are
/// averaged over the remaining levels at both train and eval time. Requires
/// the per-level-average head.
pub fn fit_missing_levels(
    store: &mut ParamStore,
    dataset: &StDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    if model.head_mode != HeadMode::PerLevelAverage {
        return Err(Error::Config(
            "missing-level training requires head_mode per-level-average".into(),
        ));
    }
    let presence = missing_level_presence(dataset, model, config.missing_level_fraction, config.seed);
    fit_impl(store, dataset, train_idx, val_idx, model, config, Some(&presence))
}

/// Deterministic per-sample presence masks: a `fraction` share of samples
/// loses exactly one uniformly chosen enabled level. A pure function of
/// (seed, sample index), so train and eval agree.
pub fn missing_level_presence(
    dataset: &StDataset,
    model: &ModelConfig,
    fraction: f64,
    seed: u64,
) -> Vec<Vec<bool>> {
    let rng = CounterRng::new(seed);
    let stream = stream_id("missing-level");
    let m = model.level_count();
    (0..dataset.samples.len())
        .map(|idx| {
            let mut present = vec![true; m];
            if fraction > 0.0 && rng.uniform_at(stream, idx as u64 * 2) < fraction {
                let victim = rng.below_at(stream, idx as u64 * 2 + 1, m);
                present[victim] = false;
            }
            present
        })
        .collect()
}

fn fit_impl(
    store: &mut ParamStore,
    dataset: &StDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    model: &ModelConfig,
    config: &TrainConfig,
    presence: Option<&[Vec<bool>]>,
) -> Result<FitOutcome> {
    model.validate()?;
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }

    let rng = CounterRng::new(config.seed);
    let mut adam = AdamState::new(store, config.lr);
    let mut log = Vec::new();
    let mut best = store.clone();
    let mut best_val_pcc = f64::NEG_INFINITY;
    let mut step: u64 = 0;
    let max_steps = config.max_steps.unwrap_or(usize::MAX) as u64;

    'epochs: for epoch in 0..config.epochs {
        let mut shuffle = rng.stream(stream_from_parts(&[stream_id("shuffle"), epoch as u64]));
        let perm = shuffle.permutation(train_idx.len());
        for chunk in perm.chunks(config.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            let batch: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let train_mse = train_step(store, &mut adam, dataset, &batch, model, config, presence, step)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite { op: "train_step" },
                    other => other,
                })
                .map_err(|e| {
                    Error::Contract(format!(
                        "training aborted at step {step} on batch {batch:?}: {e}"
                    ))
                })?;

            if step % config.eval_every as u64 == 0 || step == max_steps {
                let (val_pcc, val_rmse) =
                    validation_metrics(store, dataset, val_idx, model, presence)?;
                log.push(LogRow { step, train_mse, val_pcc, val_rmse });
                if val_pcc > best_val_pcc {
                    best_val_pcc = val_pcc;
                    best = store.clone();
                }
            }
        }
    }

    // Always close the log with a final validation row.
    if log.last().map(|r| r.step) != Some(step) && step > 0 {
        let (val_pcc, val_rmse) = validation_metrics(store, dataset, val_idx, model, presence)?;
        let train_mse = log.last().map(|r| r.train_mse).unwrap_or(f64::NAN);
        log.push(LogRow { step, train_mse, val_pcc, val_rmse });
        if val_pcc > best_val_pcc {
            best_val_pcc = val_pcc;
            best = store.clone();
        }
    }

    Ok(FitOutcome { log, best, best_val_pcc, steps_run: step })
}

/// One batch: mean of per-sample losses, accumulated gradients scaled by
/// 1/batch, one Adam update. Returns the batch training MSE.
#[allow(clippy::too_many_arguments)]
fn train_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    dataset: &StDataset,
    batch: &[usize],
    model: &ModelConfig,
    config: &TrainConfig,
    presence: Option<&[Vec<bool>]>,
    step: u64,
) -> Result<f64> {
    store.zero_grads();
    let mut loss_sum = 0.0;
    for &sample_idx in batch {
        let sample = &dataset.samples[sample_idx];
        let mask_seed = stream_from_parts(&[
            stream_id("mask"),
            config.seed,
            step,
            sample_idx as u64,
        ]);
        let mut opts = ForwardOpts {
            mode: RunMode::Train { mask_seed },
            present: Vec::new(),
            detach_head_of: None,
        };
        if let Some(masks) = presence {
            opts.present = masks[sample_idx].clone();
        }
        let tape = Tape::new(config.precision);
        let pred = m2ost_forward(&tape, sample, store, model, &opts)?;
        let loss = mse_loss(&pred, &sample.target.values, &tape)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "mse_loss" });
        }
        loss_sum += value;
        loss.backward_into(store)?;
    }
    store.scale_grads(1.0 / batch.len() as f64);
    adam_step(store, adam, config.precision)?;
    store.zero_grads();
    Ok(loss_sum / batch.len() as f64)
}

fn validation_metrics(
    store: &ParamStore,
    dataset: &StDataset,
    val_idx: &[usize],
    model: &ModelConfig,
    presence: Option<&[Vec<bool>]>,
) -> Result<(f64, f64)> {
    let preds = crate::eval::predict_with_presence(store, model, dataset, val_idx, presence)?;
    let mut pcc_sum = 0.0;
    let mut pcc_n = 0usize;
    let mut rmse_sum = 0.0;
    for (&idx, pred) in val_idx.iter().zip(&preds) {
        let target = &dataset.samples[idx].target.values;
        let p = pcc(target, pred)?;
        if p.defined {
            pcc_sum += p.value;
            pcc_n += 1;
        }
        rmse_sum += rmse(target, pred)?;
    }
    let mean_pcc = if pcc_n == 0 { 0.0 } else { pcc_sum / pcc_n as f64 };
    Ok((mean_pcc, rmse_sum / val_idx.len() as f64))
}
