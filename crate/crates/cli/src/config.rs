//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssprop_core::schedule::{Period, ScheduleKind};
use ssprop_core::{DropSchedule, ModelSpec, Precision, SampleShape, SparsifyMode};

/// Validation failures, one message per offending field.
#[derive(Debug, thiserror::Error)]
#[error("invalid config:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn sample_shape(self) -> SampleShape {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    /// Size of the standard training file(s).
    pub fn nominal_train_count(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => 60_000,
            DatasetKind::Cifar10 => 50_000,
        }
    }
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the raw IDX files or the CIFAR-10 `.bin` batches.
    pub root: PathBuf,
    /// Keep only the first `n` training samples after the validation split.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Fraction of the training file held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// SGD only.
    #[serde(default)]
    pub momentum: f64,
}

/// `"two-epochs"` or a window length in iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeriodValue {
    Iterations(usize),
    Named(String),
}

impl Default for PeriodValue {
    fn default() -> Self {
        PeriodValue::Named("two-epochs".into())
    }
}

impl PeriodValue {
    pub fn resolve(&self) -> Result<Period, String> {
        match self {
            PeriodValue::Iterations(0) => Err("sparsify.period: must be positive".into()),
            PeriodValue::Iterations(n) => Ok(Period::Iterations(*n)),
            PeriodValue::Named(s) if s == "two-epochs" => Ok(Period::TwoEpochs),
            PeriodValue::Named(s) => Err(format!(
                "sparsify.period: expected \"two-epochs\" or an iteration count, got \"{s}\""
            )),
        }
    }
}

fn default_scheduler() -> ScheduleKind {
    ScheduleKind::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyConfig {
    #[serde(default)]
    pub mode: SparsifyMode,
    /// Target drop rate `D*`.
    pub drop_rate: f64,
    #[serde(default = "default_scheduler")]
    pub scheduler: ScheduleKind,
    #[serde(default)]
    pub period: PeriodValue,
}

fn default_precision() -> u32 {
    32
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn yes() -> bool {
    true
}

fn default_eval_batch() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// 32 or 64.
    #[serde(default = "default_precision")]
    pub precision: u32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Fill the `wall_secs` metrics column; zero otherwise, which makes
    /// `metrics.csv` byte-identical across repeated runs.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    /// Absent means dense training.
    #[serde(default)]
    pub sparsify: Option<SparsifyConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text)
            .map_err(|e| ConfigError(vec![e.message().to_string() + &span_hint(text, e.span())]))
    }

    /// Reads and validates a config file. Relative dataset and output paths
    /// are resolved against the file's directory.
    pub fn load(path: &Path, need_data: bool) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.root.is_relative() {
            cfg.dataset.root = base.join(&cfg.dataset.root);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate(need_data)?;
        Ok(cfg)
    }

    pub fn validate(&self, need_data: bool) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs: must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be at least 1".to_string());
        }
        if self.eval_batch_size == 0 {
            errs.push("eval_batch_size: must be at least 1".to_string());
        }
        if let Err(e) = Precision::from_bits(self.precision) {
            errs.push(format!("precision: {e}"));
        }
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.val_fraction) {
            errs.push(format!(
                "dataset.val_fraction: {} outside [0, 1)",
                d.val_fraction
            ));
        }
        if d.train_limit == Some(0) {
            errs.push("dataset.train_limit: must be positive".to_string());
        }
        if need_data && !d.root.is_dir() {
            errs.push(format!(
                "dataset.root: {} is not a directory",
                d.root.display()
            ));
        }
        if let Err(e) = self.model.trace(d.kind.sample_shape()) {
            errs.push(format!("model.layers: {e}"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            errs.push(format!("optimizer.lr: must be positive, got {}", o.lr));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            errs.push(format!("optimizer.betas: {:?} outside [0, 1)", o.betas));
        }
        if o.eps <= 0.0 {
            errs.push("optimizer.eps: must be positive".to_string());
        }
        if !(0.0..1.0).contains(&o.momentum) {
            errs.push("optimizer.momentum: outside [0, 1)".to_string());
        }
        if let Some(s) = &self.sparsify {
            if !(0.0..1.0).contains(&s.drop_rate) {
                errs.push(format!(
                    "sparsify.drop_rate: {} outside [0, 1)",
                    s.drop_rate
                ));
            }
            if let Err(e) = s.period.resolve() {
                errs.push(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(errs))
        }
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.precision).expect("validated")
    }

    pub fn sparsify_mode(&self) -> SparsifyMode {
        self.sparsify.as_ref().map(|s| s.mode).unwrap_or_default()
    }

    /// Drop-rate schedule for `iters_per_epoch` iterations per epoch.
    pub fn schedule(&self, iters_per_epoch: usize) -> ssprop_core::Result<DropSchedule> {
        match &self.sparsify {
            None => DropSchedule::disabled(self.epochs, iters_per_epoch),
            Some(s) => DropSchedule::new(
                s.scheduler,
                s.drop_rate,
                s.period.resolve().expect("validated"),
                self.epochs,
                iters_per_epoch,
            ),
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].lines().count().max(1);
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
