//! Drop-rate schedulers: map training progress to the drop rate used by
//! every convolution layer for one iteration.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
    BarStep,
    BarPeriodic,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::BarStep => "bar-step",
            ScheduleKind::BarPeriodic => "bar-periodic",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "bar-step" => Ok(ScheduleKind::BarStep),
            "bar-periodic" => Ok(ScheduleKind::BarPeriodic),
            other => Err(Error::argument(format!("unknown scheduler `{other}`"))),
        }
    }
}

/// Window length for `BarPeriodic`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Period {
    /// Zero for the first half of every `n`-iteration window, the target for
    /// the second half.
    Iterations(usize),
    /// Zero on even (0-based) epochs, the target on odd epochs.
    TwoEpochs,
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Period::Iterations(n) => write!(f, "{n}"),
            Period::TwoEpochs => f.write_str("two-epochs"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropSchedule {
    kind: ScheduleKind,
    target: f64,
    period: Period,
    total_epochs: usize,
    iters_per_epoch: usize,
}

impl DropSchedule {
    pub fn new(
        kind: ScheduleKind,
        target: f64,
        period: Period,
        total_epochs: usize,
        iters_per_epoch: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::argument(format!(
                "target drop rate must lie in [0, 1), got {target}"
            )));
        }
        if total_epochs == 0 || iters_per_epoch == 0 {
            return Err(Error::argument(
                "schedule needs at least one epoch and one iteration per epoch",
            ));
        }
        if period == Period::Iterations(0) {
            return Err(Error::argument("schedule period must be positive"));
        }
        Ok(Self {
            kind,
            target,
            period,
            total_epochs,
            iters_per_epoch,
        })
    }

    /// A schedule that never drops anything.
    pub fn disabled(total_epochs: usize, iters_per_epoch: usize) -> Result<Self> {
        Self::new(
            ScheduleKind::Constant,
            0.0,
            Period::TwoEpochs,
            total_epochs,
            iters_per_epoch,
        )
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn period(&self) -> Period {
        self.period
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    pub fn total_iters(&self) -> usize {
        self.total_epochs * self.iters_per_epoch
    }

    /// Drop rate for iteration `iter_in_epoch` of 0-based `epoch`.
    pub fn drop_rate_at(&self, epoch: usize, iter_in_epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::argument(format!(
                "epoch {epoch} out of range for a {}-epoch schedule",
                self.total_epochs
            )));
        }
        if iter_in_epoch >= self.iters_per_epoch {
            return Err(Error::argument(format!(
                "iteration {iter_in_epoch} out of range for {} iterations per epoch",
                self.iters_per_epoch
            )));
        }
        let global = epoch * self.iters_per_epoch + iter_in_epoch;
        let total = self.total_iters();
        let progress = if total > 1 {
            global as f64 / (total - 1) as f64
        } else {
            0.0
        };
        let rate = match self.kind {
            ScheduleKind::Constant => self.target,
            ScheduleKind::Linear => self.target * progress,
            ScheduleKind::Cosine => self.target * (1.0 - (PI * progress).cos()) / 2.0,
            ScheduleKind::BarStep => {
                if 2 * global < total {
                    0.0
                } else {
                    self.target
                }
            }
            ScheduleKind::BarPeriodic => match self.period {
                Period::TwoEpochs => {
                    if epoch.is_multiple_of(2) {
                        0.0
                    } else {
                        self.target
                    }
                }
                Period::Iterations(p) => {
                    if 2 * (global % p) < p {
                        0.0
                    } else {
                        self.target
                    }
                }
            },
        };
        Ok(rate.clamp(0.0, self.target))
    }

    /// Mean of [`Self::drop_rate_at`] over every training iteration.
    pub fn average_drop_rate(&self) -> f64 {
        let mut sum = 0.0;
        for epoch in 0..self.total_epochs {
            for iter in 0..self.iters_per_epoch {
                sum += self
                    .drop_rate_at(epoch, iter)
                    .expect("indices are in range");
            }
        }
        sum / self.total_iters() as f64
    }
}
