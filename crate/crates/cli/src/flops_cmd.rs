//! `ssprop flops`: analytic backward-FLOPs report for a config.

use std::fmt::Write as _;

use anyhow::Result;
use ssprop_core::flops::{model_flops_report, EpochPlan, FlopsReport};

use crate::config::ExperimentConfig;
use crate::data::train_sample_count;

/// Report for the training run `cfg` describes. Only the dataset's file
/// headers are read, to size the epoch.
pub fn flops_report(cfg: &ExperimentConfig) -> Result<FlopsReport> {
    let plan = EpochPlan {
        samples: train_sample_count(&cfg.dataset),
        batch_size: cfg.batch_size,
    };
    let schedule = cfg.schedule(plan.iterations())?;
    Ok(model_flops_report(
        &cfg.model,
        cfg.dataset.kind.sample_shape(),
        &schedule,
        plan,
    )?)
}

pub fn render(report: &FlopsReport, cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<10} {:>16} {:>16} {:>12} {:>11}",
        "layer", "kind", "dense/iter", "sparse/iter", "overhead", "lower bound"
    );
    for l in &report.layers {
        let bound = l
            .lower_bound
            .map_or_else(|| "-".to_string(), |b| format!("{b:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>16} {:>16} {:>12} {:>11}",
            l.layer, l.kind, l.dense_flops, l.sparse_flops, l.overhead_flops, bound
        );
    }
    let _ = writeln!(
        out,
        "per iteration (batch {}, D* = {}): dense {}, sparse {}",
        report.batch_size, report.target_drop_rate, report.iteration_dense, report.iteration_sparse
    );
    let run = &report.run;
    let _ = writeln!(
        out,
        "run ({} epochs, {} iterations, average drop rate {:.4}): dense {}, actual {}, ratio {:.4}, savings {:.2}%",
        cfg.epochs,
        run.iterations,
        run.average_drop_rate,
        run.dense,
        run.actual,
        run.ratio(),
        100.0 * report.savings()
    );
    let _ = writeln!(
        out,
        "conv only: dense {}, actual {}, ratio {:.4}",
        run.conv_dense,
        run.conv_actual,
        run.conv_ratio()
    );
    for l in report.layers_without_savings() {
        let _ = writeln!(
            out,
            "warning: layer {} saves nothing at D* = {} (lower bound {:.4}); sparse backward costs {:+} FLOPs per iteration",
            l.layer,
            report.target_drop_rate,
            l.lower_bound.unwrap_or(0.0),
            l.savings_delta()
        );
    }
    out
}
