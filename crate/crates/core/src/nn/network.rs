use crate::conv::{im2col, ConvGeometry, ConvLayer};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelSpec, SampleShape};
use crate::sparsify::{sparse_conv_backward_from_cols, SparsifyMode, SparsifyPolicy};
use crate::tensor::{Element, Matrix, Tensor4};

use super::{
    kaiming_init, mix_seed, AvgPool2d, BatchNorm2d, Dropout, Linear, MaxPool2d, ParamGroup, Relu,
};

/// Convolution plus its gradient buffers and the `col_X` cached by the last
/// training forward.
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub conv: ConvLayer<T>,
    pub grad_weights: Tensor4<T>,
    pub grad_bias: Vec<T>,
    cols: Option<(Matrix<T>, [usize; 4])>,
}

impl<T: Element> ConvUnit<T> {
    pub fn new(conv: ConvLayer<T>) -> Self {
        Self {
            grad_weights: Tensor4::zeros(conv.weights().dims()),
            grad_bias: vec![T::zero(); conv.out_channels()],
            conv,
            cols: None,
        }
    }

    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        if !train {
            return self.conv.forward(x);
        }
        let out_dims = self.conv.output_dims(x.dims())?;
        let cols = im2col(x, self.conv.geometry())?;
        let col_y = crate::tensor::matmul(&cols, &self.conv.col_weights())?;
        let y = crate::conv::cols_to_output(&col_y, out_dims, Some(self.conv.bias()));
        self.cols = Some((cols, x.dims()));
        Ok(y)
    }

    /// Returns the input gradient and the number of retained channels.
    fn backward(
        &mut self,
        grad_y: &Tensor4<T>,
        policy: Option<&SparsifyPolicy>,
    ) -> Result<(Tensor4<T>, usize)> {
        let (cols, x_dims) = self
            .cols
            .as_ref()
            .ok_or_else(|| Error::argument("conv backward without a training forward"))?;
        let (grads, retained) = match policy {
            Some(p) if p.drop_rate() > 0.0 => {
                let (g, mask) =
                    sparse_conv_backward_from_cols(&self.conv, cols, *x_dims, grad_y, p)?;
                let kept = match p.mode() {
                    SparsifyMode::Channel | SparsifyMode::RandomChannel => mask.retained().len(),
                    _ => self.conv.out_channels(),
                };
                (g, kept)
            }
            _ => (
                self.conv.backward_dense_from_cols(cols, *x_dims, grad_y)?,
                self.conv.out_channels(),
            ),
        };
        self.grad_weights = grads.grad_weights;
        self.grad_bias = grads.grad_bias;
        Ok((grads.grad_input, retained))
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(ConvUnit<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu),
    MaxPool(MaxPool2d),
    AvgPool(AvgPool2d),
    Dropout(Dropout),
    Linear(Linear<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active with per-layer seeds derived from
    /// `seed`, activations cached for backward.
    Train {
        seed: u64,
    },
    Eval,
}

/// Sparsification settings for one backward pass; applied uniformly to every
/// convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardPlan {
    pub drop_rate: f64,
    pub mode: SparsifyMode,
    pub seed: u64,
}

impl BackwardPlan {
    pub fn dense() -> Self {
        Self {
            drop_rate: 0.0,
            mode: SparsifyMode::Channel,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackwardStats {
    /// `(layer name, retained channels, output channels)` per convolution.
    pub conv_channels: Vec<(String, usize, usize)>,
}

/// Named parameter or buffer tensor, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
}

/// Sequential network built from a [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ModelSpec,
    input: SampleShape,
    names: Vec<String>,
    layers: Vec<Layer<T>>,
}

impl<T: Element> Network<T> {
    /// Kaiming-initialized weights, zero biases, unit batch-norm scale.
    pub fn build(spec: &ModelSpec, input: SampleShape, seed: u64) -> Result<Self> {
        let traced = spec.trace(input)?;
        let mut layers = Vec::with_capacity(traced.len());
        for t in &traced {
            let [c, h, w] = t.input;
            let layer_seed = mix_seed(seed, t.index as u64);
            let layer = match t.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let weights = kaiming_init(
                        [out_channels, c, kernel, kernel],
                        c * kernel * kernel,
                        layer_seed,
                    )?;
                    let geometry = ConvGeometry::new(kernel, stride, padding)?;
                    Layer::Conv(ConvUnit::new(ConvLayer::new(
                        weights,
                        vec![T::zero(); out_channels],
                        geometry,
                    )?))
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm2d::new(c)),
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::MaxPool { size } => Layer::MaxPool(MaxPool2d::new(size)),
                LayerSpec::AvgPool { size } => Layer::AvgPool(AvgPool2d::new(size)),
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)?),
                LayerSpec::Linear { out_features } => {
                    let fan_in = c * h * w;
                    let w = kaiming_init::<T>([out_features, fan_in, 1, 1], fan_in, layer_seed)?;
                    let weight = Matrix::new(out_features, fan_in, w.into_vec())?;
                    Layer::Linear(Linear::new(weight, vec![T::zero(); out_features])?)
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            input,
            names: traced.into_iter().map(|t| t.name).collect(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> SampleShape {
        self.input
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.input {
            return Err(Error::shape(format!(
                "network expects samples of shape {:?}, got dims {:?}",
                self.input,
                x.dims()
            )));
        }
        let (train, seed) = match mode {
            Mode::Train { seed } => (true, seed),
            Mode::Eval => (false, 0),
        };
        let mut act = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            act = match layer {
                Layer::Conv(u) => u.forward(&act, train)?,
                Layer::BatchNorm(bn) => {
                    if train {
                        bn.forward_train(&act)?
                    } else {
                        bn.forward_eval(&act)?
                    }
                }
                Layer::Relu(r) => r.forward(&act, train),
                Layer::MaxPool(p) => p.forward(&act, train)?,
                Layer::AvgPool(p) => p.forward(&act, train)?,
                Layer::Dropout(d) => d.forward(&act, mix_seed(seed, i as u64), train)?,
                Layer::Linear(l) => l.forward(&act, train)?,
            };
        }
        Ok(act)
    }

    /// Back-propagates `grad` through the layers of the last training
    /// forward, storing parameter gradients. Returns the input gradient.
    pub fn backward(
        &mut self,
        grad: &Tensor4<T>,
        plan: &BackwardPlan,
    ) -> Result<(Tensor4<T>, BackwardStats)> {
        let mut stats = BackwardStats::default();
        let mut g = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = match layer {
                Layer::Conv(u) => {
                    let policy = if plan.drop_rate > 0.0 {
                        Some(SparsifyPolicy::new(
                            plan.mode,
                            plan.drop_rate,
                            mix_seed(plan.seed, i as u64),
                        )?)
                    } else {
                        None
                    };
                    let (gx, kept) = u.backward(&g, policy.as_ref())?;
                    stats
                        .conv_channels
                        .push((self.names[i].clone(), kept, u.conv.out_channels()));
                    gx
                }
                Layer::BatchNorm(bn) => bn.backward(&g)?,
                Layer::Relu(r) => r.backward(&g)?,
                Layer::MaxPool(p) => p.backward(&g)?,
                Layer::AvgPool(p) => p.backward(&g)?,
                Layer::Dropout(d) => d.backward(&g)?,
                Layer::Linear(l) => l.backward(&g)?,
            };
        }
        stats.conv_channels.reverse();
        Ok((g, stats))
    }

    /// Trainable parameters with their gradients, in a fixed order.
    pub fn param_groups(&mut self) -> Vec<ParamGroup<'_, T>> {
        let mut groups = Vec::new();
        for (name, layer) in self.names.iter().zip(self.layers.iter_mut()) {
            match layer {
                Layer::Conv(u) => {
                    let (w, b) = u.conv.params_mut();
                    groups.push(ParamGroup {
                        name: format!("{name}.weight"),
                        value: w,
                        grad: u.grad_weights.data(),
                    });
                    groups.push(ParamGroup {
                        name: format!("{name}.bias"),
                        value: b,
                        grad: &u.grad_bias,
                    });
                }
                Layer::BatchNorm(bn) => {
                    groups.push(ParamGroup {
                        name: format!("{name}.gamma"),
                        value: &mut bn.gamma,
                        grad: &bn.grad_gamma,
                    });
                    groups.push(ParamGroup {
                        name: format!("{name}.beta"),
                        value: &mut bn.beta,
                        grad: &bn.grad_beta,
                    });
                }
                Layer::Linear(l) => {
                    groups.push(ParamGroup {
                        name: format!("{name}.weight"),
                        value: l.weight.data_mut(),
                        grad: l.grad_weight.data(),
                    });
                    groups.push(ParamGroup {
                        name: format!("{name}.bias"),
                        value: &mut l.bias,
                        grad: &l.grad_bias,
                    });
                }
                _ => {}
            }
        }
        groups
    }

    /// Class predictions in inference mode.
    pub fn predict(&mut self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x, Mode::Eval)?;
        let classes = logits.len() / logits.batch().max(1);
        Ok(logits
            .data()
            .chunks_exact(classes.max(1))
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Every layer's stored tensors (parameters and batch-norm running
    /// statistics), in layer order.
    pub fn blocks(&self) -> Vec<(String, Vec<ParamBlock<T>>)> {
        self.names
            .iter()
            .zip(&self.layers)
            .map(|(name, layer)| {
                let blocks = match layer {
                    Layer::Conv(u) => vec![
                        block(
                            "weight",
                            u.conv.weights().dims().to_vec(),
                            u.conv.weights().data(),
                        ),
                        block("bias", vec![u.conv.out_channels()], u.conv.bias()),
                    ],
                    Layer::BatchNorm(bn) => {
                        let c = vec![bn.channels()];
                        vec![
                            block("gamma", c.clone(), &bn.gamma),
                            block("beta", c.clone(), &bn.beta),
                            block("running_mean", c.clone(), &bn.running_mean),
                            block("running_var", c, &bn.running_var),
                        ]
                    }
                    Layer::Linear(l) => vec![
                        block(
                            "weight",
                            vec![l.out_features(), l.in_features()],
                            l.weight.data(),
                        ),
                        block("bias", vec![l.out_features()], &l.bias),
                    ],
                    _ => Vec::new(),
                };
                (name.clone(), blocks)
            })
            .collect()
    }

    /// Overwrites one layer's tensors; names and dims must match
    /// [`Self::blocks`] exactly.
    pub fn load_blocks(&mut self, layer: &str, blocks: &[ParamBlock<T>]) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| Error::argument(format!("model has no layer `{layer}`")))?;
        let expected = self.blocks().swap_remove(idx).1;
        if expected.len() != blocks.len() {
            return Err(Error::argument(format!(
                "layer `{layer}` stores {} tensors, got {}",
                expected.len(),
                blocks.len()
            )));
        }
        for (e, b) in expected.iter().zip(blocks) {
            if e.name != b.name || e.dims != b.dims {
                return Err(Error::argument(format!(
                    "layer `{layer}`: expected tensor `{}` {:?}, got `{}` {:?}",
                    e.name, e.dims, b.name, b.dims
                )));
            }
        }
        let values = |name: &str| {
            blocks
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.values.clone())
                .unwrap_or_default()
        };
        match &mut self.layers[idx] {
            Layer::Conv(u) => {
                u.conv
                    .weights_mut()
                    .data_mut()
                    .copy_from_slice(&values("weight"));
                u.conv.bias_mut().copy_from_slice(&values("bias"));
            }
            Layer::BatchNorm(bn) => {
                bn.gamma = values("gamma");
                bn.beta = values("beta");
                bn.running_mean = values("running_mean");
                bn.running_var = values("running_var");
            }
            Layer::Linear(l) => {
                l.weight.data_mut().copy_from_slice(&values("weight"));
                l.bias = values("bias");
            }
            _ => {}
        }
        Ok(())
    }
}

fn block<T: Element>(name: &str, dims: Vec<usize>, values: &[T]) -> ParamBlock<T> {
    ParamBlock {
        name: name.to_string(),
        dims,
        values: values.to_vec(),
    }
}
