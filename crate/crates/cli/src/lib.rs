//! Command implementations for the `ssprop` binary.

pub mod config;
pub mod data;
pub mod eval;
pub mod flops_cmd;
pub mod train;

pub use config::{ConfigError, ExperimentConfig};
pub use eval::{evaluate, EvalReport};
pub use flops_cmd::{flops_report, render};
pub use train::{train, EpochMetrics, TrainOutcome, TrainSummary};

/// Process exit status for an error: 1 for configuration problems, 2 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        1
    } else {
        2
    }
}
