//! The training loop behind `ssprop train`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use ssprop_core::datasets::epoch_batches;
use ssprop_core::flops::{EpochPlan, FlopsMeter, IterationFlops};
use ssprop_core::nn::{cross_entropy_loss, mix_seed, Adam, Optimizer, Sgd};
use ssprop_core::{BackwardPlan, Checkpoint, Element, LabeledDataset, Mode, Network, Precision};

use crate::config::{ExperimentConfig, OptimizerKind};
use crate::data::{load_splits, Splits};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "model.sspn";

// Salts separating the random streams derived from the run seed.
const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const SELECT_STREAM: u64 = 4;

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub drop_rate: f64,
    pub backward_flops_actual: u128,
    pub backward_flops_dense: u128,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub final_test_acc: f64,
    pub final_val_acc: f64,
    pub final_train_loss: f64,
    pub seed: u64,
    pub precision: u32,
    pub train_samples: usize,
    pub iterations: usize,
    pub backward_flops_actual: u128,
    pub backward_flops_dense: u128,
    pub flops_ratio: f64,
    pub conv_backward_flops_actual: u128,
    pub conv_backward_flops_dense: u128,
    pub conv_flops_ratio: f64,
    pub average_drop_rate: f64,
    pub wall_secs: f64,
    pub checkpoint: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub summary: TrainSummary,
}

/// Fraction of `ds` classified correctly, in inference mode.
pub fn accuracy<T: Element>(
    net: &mut Network<T>,
    ds: &LabeledDataset,
    batch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = ds.batch::<T>(chunk);
        let pred = net.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// The normalized data splits a run with this config trains and evaluates
/// on.
pub fn splits(cfg: &ExperimentConfig) -> Result<Splits> {
    load_splits(&cfg.dataset, mix_seed(cfg.seed, SPLIT_STREAM))
}

fn optimizer<T: Element>(cfg: &ExperimentConfig) -> Optimizer<T> {
    let o = &cfg.optimizer;
    match o.kind {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(o.lr, o.betas[0], o.betas[1], o.eps)),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(o.lr, o.momentum)),
    }
}

/// Runs the configured experiment and writes its artifacts to
/// `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    match cfg.precision() {
        Precision::Single => train_with::<f32>(cfg),
        Precision::Double => train_with::<f64>(cfg),
    }
}

fn train_with<T: Element>(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    let splits = splits(cfg)?;
    let shape = splits.train.sample_shape();
    let plan = EpochPlan {
        samples: splits.train.len(),
        batch_size: cfg.batch_size,
    };
    let schedule = cfg.schedule(plan.iterations())?;
    let meter = FlopsMeter::new(&cfg.model, shape)?;
    let mut net = Network::<T>::build(&cfg.model, shape, cfg.seed)?;
    let mut opt = optimizer::<T>(cfg);
    let mode = cfg.sparsify_mode();

    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;

    let mut rows = Vec::with_capacity(cfg.epochs);
    // actual, dense, conv actual, conv dense
    let mut run = [0u128; 4];
    let mut run_rate_sum = 0.0;
    let mut global = 0u64;
    let mut val_acc = 0.0;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let batches = epoch_batches(
            splits.train.len(),
            cfg.batch_size,
            mix_seed(cfg.seed, SHUFFLE_STREAM),
            epoch,
        );
        let mut flops = IterationFlops::default();
        let mut loss_sum = 0.0;
        let mut rate_sum = 0.0;
        for (iter, idx) in batches.iter().enumerate() {
            let d = schedule.drop_rate_at(epoch, iter)?;
            let (x, labels) = splits.train.batch::<T>(idx);
            let logits = net.forward(
                &x,
                Mode::Train {
                    seed: mix_seed(mix_seed(cfg.seed, DROPOUT_STREAM), global),
                },
            )?;
            let (loss, grad) = cross_entropy_loss(&logits, &labels)?;
            if !loss.is_finite() {
                bail!(
                    "non-finite training loss at epoch {} iteration {iter}",
                    epoch + 1
                );
            }
            net.backward(
                &grad,
                &BackwardPlan {
                    drop_rate: d,
                    mode,
                    seed: mix_seed(mix_seed(cfg.seed, SELECT_STREAM), global),
                },
            )?;
            opt.step(&mut net.param_groups())?;
            flops += meter.iteration(idx.len(), d);
            loss_sum += loss * idx.len() as f64;
            rate_sum += d;
            global += 1;
        }
        let test_acc = accuracy(&mut net, &splits.test, cfg.eval_batch_size)?;
        val_acc = accuracy(&mut net, &splits.val, cfg.eval_batch_size)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / splits.train.len() as f64,
            test_acc,
            drop_rate: rate_sum / batches.len() as f64,
            backward_flops_actual: flops.actual as u128,
            backward_flops_dense: flops.dense as u128,
            wall_secs: if cfg.record_wall_time {
                epoch_start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        eprintln!(
            "epoch {:>3}  loss {:.4}  test acc {:.4}  val acc {:.4}  drop {:.3}  flops {}/{}",
            row.epoch,
            row.train_loss,
            row.test_acc,
            val_acc,
            row.drop_rate,
            row.backward_flops_actual,
            row.backward_flops_dense
        );
        writer.serialize(&row)?;
        writer.flush()?;
        for (acc, v) in run.iter_mut().zip([
            flops.actual,
            flops.dense,
            flops.conv_actual,
            flops.conv_dense,
        ]) {
            *acc += v as u128;
        }
        run_rate_sum += rate_sum;
        rows.push(row);
    }
    drop(writer);

    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_network(&net).save(&checkpoint)?;
    let last = rows.last().expect("at least one epoch");
    let ratio = |a: u128, b: u128| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let iterations = global as usize;
    let summary = TrainSummary {
        final_test_acc: last.test_acc,
        final_val_acc: val_acc,
        final_train_loss: last.train_loss,
        seed: cfg.seed,
        precision: cfg.precision,
        train_samples: splits.train.len(),
        iterations,
        backward_flops_actual: run[0],
        backward_flops_dense: run[1],
        flops_ratio: ratio(run[0], run[1]),
        conv_backward_flops_actual: run[2],
        conv_backward_flops_dense: run[3],
        conv_flops_ratio: ratio(run[2], run[3]),
        average_drop_rate: run_rate_sum / iterations.max(1) as f64,
        wall_secs: if cfg.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
        checkpoint: PathBuf::from(CHECKPOINT_FILE),
        config: cfg.clone(),
    };
    write_json(&cfg.output_dir.join(SUMMARY_FILE), &summary)?;
    Ok(TrainOutcome {
        epochs: rows,
        summary,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
