//! Dataset files for each configured dataset kind.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ssprop_core::datasets::{idx_item_count, load_cifar10, load_idx, normalize, split_train_val};
use ssprop_core::{ChannelStats, LabeledDataset};

use crate::config::{DatasetConfig, DatasetKind};

/// Normalized train/validation/test splits; statistics come from the
/// training split.
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: ChannelStats,
}

fn idx_files(root: &Path, prefix: &str) -> (PathBuf, PathBuf) {
    (
        root.join(format!("{prefix}-images-idx3-ubyte")),
        root.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

fn cifar_train_files(root: &Path) -> Vec<PathBuf> {
    (1..=5)
        .map(|i| root.join(format!("data_batch_{i}.bin")))
        .collect()
}

fn load_raw(cfg: &DatasetConfig, train: bool) -> Result<LabeledDataset> {
    let root = &cfg.root;
    let ds = match (cfg.kind, train) {
        (DatasetKind::Mnist | DatasetKind::FashionMnist, _) => {
            let (img, lab) = idx_files(root, if train { "train" } else { "t10k" });
            load_idx(&img, &lab).with_context(|| format!("loading {}", img.display()))?
        }
        (DatasetKind::Cifar10, true) => load_cifar10(&cifar_train_files(root), "train")?,
        (DatasetKind::Cifar10, false) => load_cifar10(&[root.join("test_batch.bin")], "test")?,
    };
    Ok(ds)
}

fn val_count(total: usize, fraction: f64) -> usize {
    (total as f64 * fraction).round() as usize
}

/// Training-sample count after the validation hold-out and limit. Reads only
/// file headers; falls back to the standard file size when files are absent.
pub fn train_sample_count(cfg: &DatasetConfig) -> usize {
    let total = match cfg.kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            idx_item_count(idx_files(&cfg.root, "train").0).ok()
        }
        DatasetKind::Cifar10 => cifar_train_files(&cfg.root)
            .iter()
            .map(|p| std::fs::metadata(p).ok().map(|m| m.len() as usize / 3073))
            .sum(),
    }
    .unwrap_or(cfg.kind.nominal_train_count());
    let train = total - val_count(total, cfg.val_fraction);
    cfg.train_limit.map_or(train, |l| l.min(train))
}

pub fn load_splits(cfg: &DatasetConfig, seed: u64) -> Result<Splits> {
    let full = load_raw(cfg, true)?;
    let (train, val) = split_train_val(&full, val_count(full.len(), cfg.val_fraction), seed)?;
    let train = match cfg.train_limit {
        Some(n) => train.truncate(n),
        None => train,
    };
    let mut test = load_raw(cfg, false)?;
    if let Some(n) = cfg.test_limit {
        test = test.truncate(n);
    }
    if train.is_empty() {
        anyhow::bail!("training split is empty");
    }
    let stats = ChannelStats::compute(&train);
    Ok(Splits {
        train: normalize(&train, &stats)?,
        val: normalize(&val, &stats)?,
        test: normalize(&test, &stats)?,
        stats,
    })
}
