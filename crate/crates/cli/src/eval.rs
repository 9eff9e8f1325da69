//! `ssprop eval`: test accuracy of a saved checkpoint.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use ssprop_core::nn::mix_seed;
use ssprop_core::{Checkpoint, Element, Network, Precision};

use crate::config::ExperimentConfig;
use crate::train::{accuracy, splits};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
}

/// Loads `checkpoint` into the configured model and scores the test split.
/// With `shuffle_seed`, the test samples are visited in a seeded random
/// order.
pub fn evaluate(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    shuffle_seed: Option<u64>,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    match cfg.precision() {
        Precision::Single => evaluate_with::<f32>(&ck, cfg, shuffle_seed),
        Precision::Double => evaluate_with::<f64>(&ck, cfg, shuffle_seed),
    }
}

fn evaluate_with<T: Element>(
    ck: &Checkpoint,
    cfg: &ExperimentConfig,
    shuffle_seed: Option<u64>,
) -> Result<EvalReport> {
    let data = splits(cfg)?;
    let mut net = Network::<T>::build(&cfg.model, data.test.sample_shape(), cfg.seed)?;
    ck.apply(&mut net)?;
    let test = match shuffle_seed {
        Some(seed) => {
            let order = ssprop_core::datasets::epoch_batches(
                data.test.len(),
                data.test.len(),
                mix_seed(seed, 1),
                0,
            );
            data.test.subset(order.concat().as_slice(), "test")
        }
        None => data.test,
    };
    Ok(EvalReport {
        accuracy: accuracy(&mut net, &test, cfg.eval_batch_size)?,
        samples: test.len(),
    })
}
