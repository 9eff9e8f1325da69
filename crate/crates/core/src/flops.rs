//! Analytic backward-pass FLOPs.
//!
//! Every addition, subtraction, multiplication and division counts as one
//! FLOP. Only convolution, batch-norm and dropout backward passes are
//! counted; the selection step adds one summation per output-gradient element
//! per channel and its sort contributes nothing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelSpec, SampleShape, TracedLayer};
use crate::schedule::DropSchedule;

/// `(Bt·Hout·Wout)·(4·Cin·K² + 1)·Cout`.
pub fn conv_backward_flops_dense(
    bt: usize,
    h_out: usize,
    w_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> u64 {
    let m = (bt * h_out * w_out) as u64;
    let n = (c_in * k * k) as u64;
    m * (4 * n + 1) * c_out as u64
}

/// `[(4MN + M)(1 − D) + M]·Cout` rounded to the nearest integer, with
/// `M = Bt·Hout·Wout` and `N = Cin·K²`. The trailing `M·Cout` is the
/// importance-summation overhead.
pub fn conv_backward_flops_sparse(
    bt: usize,
    h_out: usize,
    w_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    d: f64,
) -> u64 {
    let m = (bt * h_out * w_out) as f64;
    let n = (c_in * k * k) as f64;
    (((4.0 * m * n + m) * (1.0 - d) + m) * c_out as f64).round() as u64
}

/// Importance-summation overhead, `M·Cout`.
pub fn selection_overhead_flops(bt: usize, h_out: usize, w_out: usize, c_out: usize) -> u64 {
    (bt * h_out * w_out * c_out) as u64
}

/// `12·(Bt·H·W·C) + 10·C`.
pub fn batchnorm_backward_flops(bt: usize, h: usize, w: usize, c: usize) -> u64 {
    12 * (bt * h * w * c) as u64 + 10 * c as u64
}

/// `2·(Bt·H·W·C)`.
pub fn dropout_backward_flops(bt: usize, h: usize, w: usize, c: usize) -> u64 {
    2 * (bt * h * w * c) as u64
}

/// Smallest drop rate at which the sparse backward is cheaper than the dense
/// one: `1 / (4·Cin·K² + 1)`.
pub fn drop_rate_lower_bound(c_in: usize, k: usize) -> f64 {
    1.0 / (4 * c_in * k * k + 1) as f64
}

/// Backward cost of one layer for a batch of `bt` at drop rate `d`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: String,
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub overhead_flops: u64,
    /// Only for convolutions.
    pub lower_bound: Option<f64>,
}

impl LayerCost {
    pub fn is_conv(&self) -> bool {
        self.lower_bound.is_some()
    }

    /// Sparse minus dense; negative when sparsification saves work.
    pub fn savings_delta(&self) -> i128 {
        self.sparse_flops as i128 - self.dense_flops as i128
    }

    /// FLOPs actually spent in one iteration at `d`. A zero drop rate runs
    /// the dense backward with no selection step.
    pub fn actual_flops(&self, d: f64) -> u64 {
        if d == 0.0 {
            self.dense_flops
        } else {
            self.sparse_flops
        }
    }
}

pub fn layer_cost(layer: &TracedLayer, bt: usize, d: f64) -> LayerCost {
    let [c, h, w] = layer.input;
    let [c_out, h_out, w_out] = layer.output;
    let (dense, sparse, overhead, bound) = match layer.spec {
        LayerSpec::Conv { kernel, .. } => (
            conv_backward_flops_dense(bt, h_out, w_out, c, c_out, kernel),
            conv_backward_flops_sparse(bt, h_out, w_out, c, c_out, kernel, d),
            selection_overhead_flops(bt, h_out, w_out, c_out),
            Some(drop_rate_lower_bound(c, kernel)),
        ),
        LayerSpec::BatchNorm => {
            let f = batchnorm_backward_flops(bt, h, w, c);
            (f, f, 0, None)
        }
        LayerSpec::Dropout { .. } => {
            let f = dropout_backward_flops(bt, h, w, c);
            (f, f, 0, None)
        }
        _ => (0, 0, 0, None),
    };
    LayerCost {
        layer: layer.name.clone(),
        kind: layer.spec.kind().to_string(),
        dense_flops: dense,
        sparse_flops: sparse,
        overhead_flops: overhead,
        lower_bound: bound,
    }
}

/// Number and sizes of the batches in one epoch; the last batch may be
/// partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EpochPlan {
    pub samples: usize,
    pub batch_size: usize,
}

impl EpochPlan {
    pub fn iterations(&self) -> usize {
        self.samples.div_ceil(self.batch_size.max(1))
    }

    pub fn batch_at(&self, iter: usize) -> usize {
        self.batch_size.min(self.samples - iter * self.batch_size)
    }
}

/// Backward FLOPs of one iteration, split into convolution and the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IterationFlops {
    pub actual: u64,
    pub dense: u64,
    pub conv_actual: u64,
    pub conv_dense: u64,
}

impl std::ops::AddAssign for IterationFlops {
    fn add_assign(&mut self, rhs: Self) {
        self.actual += rhs.actual;
        self.dense += rhs.dense;
        self.conv_actual += rhs.conv_actual;
        self.conv_dense += rhs.conv_dense;
    }
}

/// Resolved model geometry; evaluates per-iteration backward cost.
#[derive(Clone, Debug)]
pub struct FlopsMeter {
    layers: Vec<TracedLayer>,
}

impl FlopsMeter {
    pub fn new(model: &ModelSpec, input: SampleShape) -> Result<Self> {
        Ok(Self {
            layers: model.trace(input)?,
        })
    }

    pub fn layer_costs(&self, bt: usize, d: f64) -> Vec<LayerCost> {
        self.layers.iter().map(|l| layer_cost(l, bt, d)).collect()
    }

    pub fn iteration(&self, bt: usize, d: f64) -> IterationFlops {
        let mut total = IterationFlops::default();
        for cost in self.layer_costs(bt, d) {
            let actual = cost.actual_flops(d);
            total.actual += actual;
            total.dense += cost.dense_flops;
            if cost.is_conv() {
                total.conv_actual += actual;
                total.conv_dense += cost.dense_flops;
            }
        }
        total
    }
}

/// Totals over a whole training run, summing every iteration at its
/// scheduled drop rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunTotals {
    pub iterations: usize,
    pub dense: u128,
    pub actual: u128,
    pub conv_dense: u128,
    pub conv_actual: u128,
    pub average_drop_rate: f64,
}

impl RunTotals {
    /// Actual over dense, all counted layers.
    pub fn ratio(&self) -> f64 {
        ratio(self.actual, self.dense)
    }

    pub fn conv_ratio(&self) -> f64 {
        ratio(self.conv_actual, self.conv_dense)
    }
}

fn ratio(a: u128, b: u128) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub batch_size: usize,
    pub target_drop_rate: f64,
    /// Per-layer cost of one full batch at the target drop rate.
    pub layers: Vec<LayerCost>,
    pub iteration_dense: u64,
    pub iteration_sparse: u64,
    pub run: RunTotals,
}

impl FlopsReport {
    pub fn savings(&self) -> f64 {
        1.0 - self.run.ratio()
    }

    /// Convolutions whose sparse cost at the target rate exceeds the dense
    /// cost.
    pub fn layers_without_savings(&self) -> Vec<&LayerCost> {
        self.layers
            .iter()
            .filter(|l| l.is_conv() && l.savings_delta() >= 0)
            .collect()
    }
}

pub fn model_flops_report(
    model: &ModelSpec,
    input: SampleShape,
    schedule: &DropSchedule,
    plan: EpochPlan,
) -> Result<FlopsReport> {
    if schedule.iters_per_epoch() != plan.iterations() {
        return Err(Error::argument(format!(
            "schedule has {} iterations per epoch, batch plan has {}",
            schedule.iters_per_epoch(),
            plan.iterations()
        )));
    }
    let meter = FlopsMeter::new(model, input)?;
    let target = schedule.target();
    let layers = meter.layer_costs(plan.batch_size, target);
    let iteration_dense = layers.iter().map(|l| l.dense_flops).sum();
    let iteration_sparse = layers.iter().map(|l| l.sparse_flops).sum();

    let mut run = RunTotals::default();
    let mut rate_sum = 0.0;
    for epoch in 0..schedule.total_epochs() {
        for iter in 0..plan.iterations() {
            let d = schedule.drop_rate_at(epoch, iter)?;
            let it = meter.iteration(plan.batch_at(iter), d);
            run.dense += it.dense as u128;
            run.actual += it.actual as u128;
            run.conv_dense += it.conv_dense as u128;
            run.conv_actual += it.conv_actual as u128;
            run.iterations += 1;
            rate_sum += d;
        }
    }
    if run.iterations > 0 {
        run.average_drop_rate = rate_sum / run.iterations as f64;
    }
    Ok(FlopsReport {
        batch_size: plan.batch_size,
        target_drop_rate: target,
        layers,
        iteration_dense,
        iteration_sparse,
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{Period, ScheduleKind};

    #[test]
    fn dense_conv_examples() {
        assert_eq!(conv_backward_flops_dense(1, 2, 2, 2, 2, 2), 264);
        assert_eq!(conv_backward_flops_dense(1, 1, 1, 1, 1, 1), 5);
        assert_eq!(conv_backward_flops_dense(2, 2, 2, 2, 2, 2), 528);
    }

    #[test]
    fn sparse_conv_examples() {
        // M = 4, N = 8 comes from Bt·Hout·Wout = 1·2·2 and Cin·K² = 2·2².
        assert_eq!(conv_backward_flops_sparse(1, 2, 2, 2, 2, 2, 0.5), 140);
        assert_eq!(conv_backward_flops_sparse(1, 2, 2, 2, 2, 2, 0.0), 272);
        assert_eq!(
            conv_backward_flops_sparse(1, 2, 2, 2, 2, 2, 0.999_999_999),
            8
        );
    }

    #[test]
    fn batchnorm_and_dropout_examples() {
        assert_eq!(batchnorm_backward_flops(2, 2, 2, 3), 318);
        assert_eq!(batchnorm_backward_flops(1, 1, 1, 1), 22);
        assert!(
            batchnorm_backward_flops(1, 2, 2, 6) > 2 * batchnorm_backward_flops(1, 2, 2, 3) - 1
        );
        assert_eq!(dropout_backward_flops(2, 2, 2, 3), 48);
        assert_eq!(dropout_backward_flops(1, 1, 1, 1), 2);
        assert_eq!(
            dropout_backward_flops(2, 4, 2, 3),
            2 * dropout_backward_flops(2, 2, 2, 3)
        );
    }

    #[test]
    fn lower_bounds() {
        assert_eq!(drop_rate_lower_bound(1, 3), 1.0 / 37.0);
        assert!((drop_rate_lower_bound(1, 3) - 0.027).abs() < 1e-3);
        assert_eq!(drop_rate_lower_bound(2, 2), 1.0 / 33.0);
        assert!(drop_rate_lower_bound(2, 3) < drop_rate_lower_bound(1, 3));
    }

    #[test]
    fn partial_last_batch() {
        let plan = EpochPlan {
            samples: 300,
            batch_size: 128,
        };
        assert_eq!(plan.iterations(), 3);
        assert_eq!(plan.batch_at(2), 44);
    }

    #[test]
    fn fully_connected_model_has_no_conv_cost() {
        let model = ModelSpec::new(vec![LayerSpec::Linear { out_features: 10 }]);
        let schedule =
            DropSchedule::new(ScheduleKind::BarPeriodic, 0.8, Period::TwoEpochs, 2, 4).unwrap();
        let report = model_flops_report(
            &model,
            [1, 28, 28],
            &schedule,
            EpochPlan {
                samples: 512,
                batch_size: 128,
            },
        )
        .unwrap();
        assert_eq!(report.run.conv_dense, 0);
        assert_eq!(report.run.dense, 0);
        assert_eq!(report.run.ratio(), 1.0);
        assert_eq!(report.run.iterations, 8);
    }
}
