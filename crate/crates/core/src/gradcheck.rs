//! Verification suites: central finite differences against every layer's
//! backward, adjointness of the columnization and of the convolution, and
//! the sparse backward against dense backward on a masked output gradient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{col2im, im2col, ConvGeometry, ConvLayer};
use crate::error::Result;
use crate::nn::{
    cross_entropy_loss, mix_seed, AvgPool2d, BatchNorm2d, Dropout, Linear, MaxPool2d, Relu,
};
use crate::sparsify::{
    channel_importance, retained_count, select_channels, sparse_conv_backward, zero_units,
    SparsifyMode, SparsifyPolicy,
};
use crate::tensor::{Element, Matrix, Precision, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    FiniteDifference,
    Adjointness,
    MaskedOracle,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::FiniteDifference => "finite-difference",
            Suite::Adjointness => "adjointness",
            Suite::MaskedOracle => "masked-oracle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} {:<40} error {:.3e} (tol {:.0e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.suite,
            self.name,
            self.error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub precision: Precision,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    pub fn worst(&self, suite: Suite) -> Option<&CheckResult> {
        self.results
            .iter()
            .filter(|r| r.suite == suite)
            .max_by(|a, b| a.error.total_cmp(&b.error))
    }

    /// Worst error among finite-difference checks of convolution layers.
    pub fn worst_conv(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .filter(|r| r.suite == Suite::FiniteDifference && r.name.starts_with("conv"))
            .max_by(|a, b| a.error.total_cmp(&b.error))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck seed {} precision {}",
            self.seed,
            self.precision.bits()
        )?;
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        for suite in [
            Suite::FiniteDifference,
            Suite::Adjointness,
            Suite::MaskedOracle,
        ] {
            if let Some(w) = self.worst(suite) {
                writeln!(f, "worst {suite}: {:.3e} ({})", w.error, w.name)?;
            }
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} of {} checks passed{}",
            self.results.len() - failed,
            self.results.len(),
            if failed == 0 { "" } else { "; FAILED" }
        )
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element
/// of every input vector.
pub fn finite_difference(
    mut f: impl FnMut(&[Vec<f64>]) -> Result<f64>,
    inputs: &[Vec<f64>],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for v in 0..inputs.len() {
        let mut g = vec![0.0; inputs[v].len()];
        for i in 0..inputs[v].len() {
            let orig = work[v][i];
            work[v][i] = orig + step;
            let plus = f(&work)?;
            work[v][i] = orig - step;
            let minus = f(&work)?;
            work[v][i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// A scalar function of one or more input vectors with an analytic gradient.
pub trait GradientProbe {
    fn name(&self) -> String;

    /// Point at which to check; the first vector is the layer input, the
    /// rest are parameters.
    fn inputs(&self) -> Vec<Vec<f64>>;

    /// Loss and analytic gradient per input, computed in `precision`.
    fn evaluate(&self, inputs: &[Vec<f64>], precision: Precision) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Compares a probe's analytic gradient (in `precision`) with central
/// differences of its 64-bit loss.
pub fn check_probe(
    probe: &dyn GradientProbe,
    step: f64,
    tolerance: f64,
    precision: Precision,
) -> Result<CheckResult> {
    let inputs = probe.inputs();
    let (_, analytic) = probe.evaluate(&inputs, precision)?;
    let numeric = finite_difference(
        |x| Ok(probe.evaluate(x, Precision::Double)?.0),
        &inputs,
        step,
    )?;
    Ok(CheckResult {
        suite: Suite::FiniteDifference,
        name: probe.name(),
        error: relative_error(&analytic.concat(), &numeric.concat()),
        tolerance,
    })
}

/// Layer instances under test. Every probe except cross-entropy uses the
/// loss `Σ y ⊙ r` for a fixed random `r`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerProbe {
    Conv {
        geometry: ConvGeometry,
        input: [usize; 4],
        out_channels: usize,
        seed: u64,
    },
    BatchNorm {
        input: [usize; 4],
        seed: u64,
    },
    Linear {
        batch: usize,
        in_features: usize,
        out_features: usize,
        seed: u64,
    },
    Relu {
        input: [usize; 4],
        seed: u64,
    },
    MaxPool {
        input: [usize; 4],
        size: usize,
        seed: u64,
    },
    AvgPool {
        input: [usize; 4],
        size: usize,
        seed: u64,
    },
    Dropout {
        input: [usize; 4],
        rate: f64,
        seed: u64,
    },
    CrossEntropy {
        batch: usize,
        classes: usize,
        seed: u64,
    },
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor<T: Element>(dims: [usize; 4], v: &[f64]) -> Result<Tensor4<T>> {
    Tensor4::new(dims, v.iter().map(|&x| T::of(x)).collect())
}

fn to_f64<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// `Σ y ⊙ r` and `r` as the output gradient.
fn project<T: Element>(y: &Tensor4<T>, seed: u64) -> Result<(f64, Tensor4<T>)> {
    let r = uniform(y.len(), mix_seed(seed, 0xF00D));
    let loss = y.data().iter().zip(&r).map(|(a, b)| a.as_f64() * b).sum();
    Ok((loss, tensor(y.dims(), &r)?))
}

fn elems(d: [usize; 4]) -> usize {
    d.iter().product()
}

impl LayerProbe {
    fn seed(&self) -> u64 {
        match *self {
            LayerProbe::Conv { seed, .. }
            | LayerProbe::BatchNorm { seed, .. }
            | LayerProbe::Linear { seed, .. }
            | LayerProbe::Relu { seed, .. }
            | LayerProbe::MaxPool { seed, .. }
            | LayerProbe::AvgPool { seed, .. }
            | LayerProbe::Dropout { seed, .. }
            | LayerProbe::CrossEntropy { seed, .. } => seed,
        }
    }

    fn run<T: Element>(&self, inputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let seed = self.seed();
        match *self {
            LayerProbe::Conv {
                geometry,
                input,
                out_channels,
                ..
            } => {
                let k = geometry.kernel;
                let w = tensor::<T>([out_channels, input[1], k, k], &inputs[1])?;
                let b = inputs[2].iter().map(|&v| T::of(v)).collect();
                let layer = ConvLayer::new(w, b, geometry)?;
                let x = tensor::<T>(input, &inputs[0])?;
                let (loss, gy) = project(&layer.forward(&x)?, seed)?;
                let g = layer.backward_dense(&x, &gy)?;
                Ok((
                    loss,
                    vec![
                        to_f64(g.grad_input.data()),
                        to_f64(g.grad_weights.data()),
                        to_f64(&g.grad_bias),
                    ],
                ))
            }
            LayerProbe::BatchNorm { input, .. } => {
                let mut bn = BatchNorm2d::<T>::new(input[1]);
                bn.gamma = inputs[1].iter().map(|&v| T::of(v)).collect();
                bn.beta = inputs[2].iter().map(|&v| T::of(v)).collect();
                let (loss, gy) =
                    project(&bn.forward_train(&tensor::<T>(input, &inputs[0])?)?, seed)?;
                let gx = bn.backward(&gy)?;
                Ok((
                    loss,
                    vec![
                        to_f64(gx.data()),
                        to_f64(&bn.grad_gamma),
                        to_f64(&bn.grad_beta),
                    ],
                ))
            }
            LayerProbe::Linear {
                batch,
                in_features,
                out_features,
                ..
            } => {
                let w = Matrix::new(
                    out_features,
                    in_features,
                    inputs[1].iter().map(|&v| T::of(v)).collect(),
                )?;
                let mut lin = Linear::new(w, inputs[2].iter().map(|&v| T::of(v)).collect())?;
                let x = tensor::<T>([batch, in_features, 1, 1], &inputs[0])?;
                let (loss, gy) = project(&lin.forward(&x, true)?, seed)?;
                let gx = lin.backward(&gy)?;
                Ok((
                    loss,
                    vec![
                        to_f64(gx.data()),
                        to_f64(lin.grad_weight.data()),
                        to_f64(&lin.grad_bias),
                    ],
                ))
            }
            LayerProbe::Relu { input, .. } => {
                let mut r = Relu::new();
                let (loss, gy) = project(&r.forward(&tensor::<T>(input, &inputs[0])?, true), seed)?;
                Ok((loss, vec![to_f64(r.backward(&gy)?.data())]))
            }
            LayerProbe::MaxPool { input, size, .. } => {
                let mut p = MaxPool2d::new(size);
                let (loss, gy) =
                    project(&p.forward(&tensor::<T>(input, &inputs[0])?, true)?, seed)?;
                Ok((loss, vec![to_f64(p.backward(&gy)?.data())]))
            }
            LayerProbe::AvgPool { input, size, .. } => {
                let mut p = AvgPool2d::new(size);
                let (loss, gy) =
                    project(&p.forward(&tensor::<T>(input, &inputs[0])?, true)?, seed)?;
                Ok((loss, vec![to_f64(p.backward(&gy)?.data())]))
            }
            LayerProbe::Dropout { input, rate, .. } => {
                let mut d = Dropout::new(rate)?;
                let y = d.forward(&tensor::<T>(input, &inputs[0])?, seed, true)?;
                let (loss, gy) = project(&y, seed)?;
                Ok((loss, vec![to_f64(d.backward(&gy)?.data())]))
            }
            LayerProbe::CrossEntropy { batch, classes, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
                let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
                let (loss, g) =
                    cross_entropy_loss(&tensor::<T>([batch, classes, 1, 1], &inputs[0])?, &labels)?;
                Ok((loss, vec![to_f64(g.data())]))
            }
        }
    }
}

impl GradientProbe for LayerProbe {
    fn name(&self) -> String {
        let d = |v: [usize; 4]| format!("{}x{}x{}x{}", v[0], v[1], v[2], v[3]);
        match *self {
            LayerProbe::Conv {
                geometry,
                input,
                out_channels,
                ..
            } => format!(
                "conv k{} s{} p{} {} -> {out_channels}",
                geometry.kernel,
                geometry.stride,
                geometry.padding,
                d(input)
            ),
            LayerProbe::BatchNorm { input, .. } => format!("batchnorm {}", d(input)),
            LayerProbe::Linear {
                batch,
                in_features,
                out_features,
                ..
            } => format!("linear {batch}x{in_features} -> {out_features}"),
            LayerProbe::Relu { input, .. } => format!("relu {}", d(input)),
            LayerProbe::MaxPool { input, size, .. } => format!("maxpool{size} {}", d(input)),
            LayerProbe::AvgPool { input, size, .. } => format!("avgpool{size} {}", d(input)),
            LayerProbe::Dropout { input, rate, .. } => format!("dropout{rate} {}", d(input)),
            LayerProbe::CrossEntropy { batch, classes, .. } => {
                format!("cross-entropy {batch}x{classes}")
            }
        }
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        let s = self.seed();
        let u = |n: usize, salt: u64| uniform(n, mix_seed(s, salt));
        match *self {
            LayerProbe::Conv {
                geometry,
                input,
                out_channels,
                ..
            } => vec![
                u(elems(input), 1),
                u(
                    out_channels * input[1] * geometry.kernel * geometry.kernel,
                    2,
                ),
                u(out_channels, 3),
            ],
            LayerProbe::BatchNorm { input, .. } => {
                let gamma = u(input[1], 2).iter().map(|v| 1.0 + 0.5 * v).collect();
                vec![u(elems(input), 1), gamma, u(input[1], 3)]
            }
            LayerProbe::Linear {
                batch,
                in_features,
                out_features,
                ..
            } => vec![
                u(batch * in_features, 1),
                u(out_features * in_features, 2),
                u(out_features, 3),
            ],
            LayerProbe::Relu { input, .. }
            | LayerProbe::MaxPool { input, .. }
            | LayerProbe::AvgPool { input, .. }
            | LayerProbe::Dropout { input, .. } => vec![u(elems(input), 1)],
            LayerProbe::CrossEntropy { batch, classes, .. } => {
                vec![u(batch * classes, 1).iter().map(|v| 3.0 * v).collect()]
            }
        }
    }

    fn evaluate(&self, inputs: &[Vec<f64>], precision: Precision) -> Result<(f64, Vec<Vec<f64>>)> {
        match precision {
            Precision::Single => self.run::<f32>(inputs),
            Precision::Double => self.run::<f64>(inputs),
        }
    }
}

/// A random small convolution case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvCase {
    pub geometry: ConvGeometry,
    pub input: [usize; 4],
    pub out_channels: usize,
    pub seed: u64,
}

impl ConvCase {
    pub fn probe(&self) -> LayerProbe {
        LayerProbe::Conv {
            geometry: self.geometry,
            input: self.input,
            out_channels: self.out_channels,
            seed: self.seed,
        }
    }

    pub fn layer<T: Element>(&self) -> Result<ConvLayer<T>> {
        let inputs = self.probe().inputs();
        let k = self.geometry.kernel;
        ConvLayer::new(
            tensor([self.out_channels, self.input[1], k, k], &inputs[1])?,
            inputs[2].iter().map(|&v| T::of(v)).collect(),
            self.geometry,
        )
    }

    pub fn input_tensor<T: Element>(&self) -> Result<Tensor4<T>> {
        tensor(self.input, &self.probe().inputs()[0])
    }
}

/// `repeats` random cases for every `K ∈ {1,2,3}`, `s ∈ {1,2}`, `p ∈ {0,1}`,
/// each with an input size that divides exactly.
pub fn conv_cases(seed: u64, repeats: usize) -> Vec<ConvCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..repeats {
        for kernel in 1..=3 {
            for stride in 1..=2 {
                for padding in 0..=1 {
                    let size = |rng: &mut ChaCha8Rng| {
                        let mut out = rng.random_range(1..=4usize);
                        loop {
                            let n = (out - 1) * stride + kernel;
                            if n > 2 * padding {
                                return n - 2 * padding;
                            }
                            out += 1;
                        }
                    };
                    let (h, w) = (size(&mut rng), size(&mut rng));
                    cases.push(ConvCase {
                        geometry: ConvGeometry::new(kernel, stride, padding)
                            .expect("valid geometry"),
                        input: [rng.random_range(1..=2), rng.random_range(1..=3), h, w],
                        out_channels: rng.random_range(1..=4),
                        seed: rng.random(),
                    });
                }
            }
        }
    }
    cases
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scalar_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `⟨im2col(x), C⟩ = ⟨x, col2im(C)⟩` and `⟨conv(x), g⟩ = ⟨x, ∂x(g)⟩` for the
/// bias-free convolution.
pub fn adjointness_checks<T: Element>(case: &ConvCase, tolerance: f64) -> Result<Vec<CheckResult>> {
    let x = case.input_tensor::<T>()?;
    let cols = im2col(&x, case.geometry)?;
    let c = uniform(cols.rows() * cols.cols(), mix_seed(case.seed, 7));
    let c_mat = Matrix::new(
        cols.rows(),
        cols.cols(),
        c.iter().map(|&v| T::of(v)).collect(),
    )?;
    let back = col2im(&c_mat, x.dims(), case.geometry)?;
    let lhs = dot(&to_f64(cols.data()), &c);
    let rhs = dot(&to_f64(x.data()), &to_f64(back.data()));

    let mut layer = case.layer::<T>()?;
    layer.bias_mut().fill(T::zero());
    let y = layer.forward(&x)?;
    let g = uniform(y.len(), mix_seed(case.seed, 8));
    let gx = layer.backward_dense(&x, &tensor(y.dims(), &g)?)?.grad_input;
    let name = LayerProbe::name(&case.probe());
    Ok(vec![
        CheckResult {
            suite: Suite::Adjointness,
            name: format!("im2col/col2im {}", &name[5..]),
            error: scalar_error(lhs, rhs),
            tolerance,
        },
        CheckResult {
            suite: Suite::Adjointness,
            name: format!("{name} input grad"),
            error: scalar_error(
                dot(&to_f64(y.data()), &g),
                dot(&to_f64(x.data()), &to_f64(gx.data())),
            ),
            tolerance,
        },
    ])
}

/// Sparse channel backward against dense backward of the output gradient
/// with the dropped channels zeroed. `D = 0` must match bit for bit.
pub fn masked_oracle_check<T: Element>(
    case: &ConvCase,
    drop_rate: f64,
    tolerance: f64,
) -> Result<CheckResult> {
    let layer = case.layer::<T>()?;
    let x = case.input_tensor::<T>()?;
    let out = layer.output_dims(x.dims())?;
    let grad_y = tensor::<T>(out, &uniform(elems(out), mix_seed(case.seed, 9)))?;
    let policy = SparsifyPolicy::new(SparsifyMode::Channel, drop_rate, case.seed)?;
    let (sparse, _) = sparse_conv_backward(&layer, &x, &grad_y, &policy)?;

    let importance = channel_importance(&grad_y, SparsifyMode::Channel)?;
    let mask = select_channels(&importance, retained_count(out[1], drop_rate), &policy)?;
    let dense = layer.backward_dense(&x, &zero_units(&grad_y, &mask, SparsifyMode::Channel))?;

    let flat = |g: &crate::conv::ConvGradients<T>| {
        [
            to_f64(g.grad_input.data()),
            to_f64(g.grad_weights.data()),
            to_f64(&g.grad_bias),
        ]
        .concat()
    };
    let (a, b) = (flat(&sparse), flat(&dense));
    let (error, tolerance) = if drop_rate == 0.0 {
        let identical = sparse == layer.backward_dense(&x, &grad_y)?;
        (if identical { 0.0 } else { f64::INFINITY }, 0.0)
    } else {
        let scale = b
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let worst = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        (worst / scale, tolerance)
    };
    Ok(CheckResult {
        suite: Suite::MaskedOracle,
        name: format!("{} D={drop_rate}", LayerProbe::name(&case.probe())),
        error,
        tolerance,
    })
}

/// Tolerances per precision: `(conv finite difference, other layers,
/// adjointness, masked oracle)`.
pub fn tolerances(precision: Precision) -> (f64, f64, f64, f64) {
    match precision {
        Precision::Double => (1e-6, 1e-5, 1e-12, 1e-12),
        Precision::Single => (1e-4, 1e-3, 1e-5, 1e-6),
    }
}

/// Small non-convolution layers exercised by the finite-difference suite.
pub fn layer_probes(seed: u64) -> Vec<LayerProbe> {
    let s = |k: u64| mix_seed(seed, 1000 + k);
    vec![
        LayerProbe::BatchNorm {
            input: [3, 2, 3, 3],
            seed: s(0),
        },
        LayerProbe::BatchNorm {
            input: [1, 3, 1, 1],
            seed: s(1),
        },
        LayerProbe::Linear {
            batch: 3,
            in_features: 5,
            out_features: 4,
            seed: s(2),
        },
        LayerProbe::Relu {
            input: [2, 2, 3, 3],
            seed: s(3),
        },
        LayerProbe::MaxPool {
            input: [2, 2, 4, 4],
            size: 2,
            seed: s(4),
        },
        LayerProbe::AvgPool {
            input: [2, 2, 4, 6],
            size: 2,
            seed: s(5),
        },
        LayerProbe::Dropout {
            input: [2, 3, 3, 3],
            rate: 0.3,
            seed: s(6),
        },
        LayerProbe::CrossEntropy {
            batch: 4,
            classes: 10,
            seed: s(7),
        },
    ]
}

/// Runs all three suites on cases drawn from `seed`.
pub fn run_suite(seed: u64, precision: Precision) -> Result<GradcheckReport> {
    let (fd_conv, fd_other, adj_tol, mask_tol) = tolerances(precision);
    let step = 1e-5;
    let cases = conv_cases(seed, 2);
    let mut results = Vec::new();
    for case in &cases {
        results.push(check_probe(&case.probe(), step, fd_conv, precision)?);
    }
    for probe in layer_probes(seed) {
        results.push(check_probe(&probe, step, fd_other, precision)?);
    }
    for case in &cases {
        results.extend(match precision {
            Precision::Single => adjointness_checks::<f32>(case, adj_tol)?,
            Precision::Double => adjointness_checks::<f64>(case, adj_tol)?,
        });
    }
    for case in &cases {
        for d in [0.0, 0.25, 0.5, 0.8] {
            results.push(match precision {
                Precision::Single => masked_oracle_check::<f32>(case, d, mask_tol)?,
                Precision::Double => masked_oracle_check::<f64>(case, d, mask_tol)?,
            });
        }
    }
    Ok(GradcheckReport {
        seed,
        precision,
        results,
    })
}
