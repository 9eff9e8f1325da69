//! Declarative description of a sequential network and shape tracing through
//! it. Both the FLOPs meter and the runtime network are built from this.

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};

fn one() -> usize {
    1
}

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Fully connected; flattens `(C, H, W)` to `C·H·W` features.
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

/// Per-sample feature shape `(channels, height, width)`.
pub type SampleShape = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

/// Input and output shape of one layer, as resolved by [`ModelSpec::trace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TracedLayer {
    pub index: usize,
    pub name: String,
    pub spec: LayerSpec,
    pub input: SampleShape,
    pub output: SampleShape,
}

pub fn layer_name(index: usize, spec: &LayerSpec) -> String {
    format!("{index}.{}", spec.kind())
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// Two conv blocks (conv, batchnorm, ReLU, 2×2 max-pool) and a linear
    /// classifier.
    pub fn small_cnn(channels: [usize; 2], classes: usize) -> Self {
        let mut layers = Vec::new();
        for c in channels {
            layers.extend([
                LayerSpec::Conv {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
            ]);
        }
        layers.push(LayerSpec::Linear {
            out_features: classes,
        });
        Self { layers }
    }

    /// Resolves every layer's shapes for the given input, failing with the
    /// name of the first layer whose geometry does not resolve.
    pub fn trace(&self, input: SampleShape) -> Result<Vec<TracedLayer>> {
        let mut shape = input;
        let mut traced = Vec::with_capacity(self.layers.len());
        for (index, spec) in self.layers.iter().enumerate() {
            let name = layer_name(index, spec);
            let fail = |msg: String| Error::shape(format!("layer {name}: {msg}"));
            let [c, h, w] = shape;
            let output = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if out_channels == 0 {
                        return Err(fail("out_channels must be positive".into()));
                    }
                    let geometry = ConvGeometry::new(kernel, stride, padding)
                        .map_err(|e| fail(e.to_string()))?;
                    let (ho, wo) = geometry.output_hw(h, w).map_err(|e| fail(e.to_string()))?;
                    [out_channels, ho, wo]
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => shape,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(fail(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    shape
                }
                LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size } => {
                    if size == 0 || size > h || size > w {
                        return Err(fail(format!("pool size {size} does not fit {h}x{w}")));
                    }
                    [c, h / size, w / size]
                }
                LayerSpec::Linear { out_features } => {
                    if out_features == 0 {
                        return Err(fail("out_features must be positive".into()));
                    }
                    [out_features, 1, 1]
                }
            };
            if output.contains(&0) {
                return Err(fail(format!("empty output shape {output:?}")));
            }
            traced.push(TracedLayer {
                index,
                name,
                spec: spec.clone(),
                input: shape,
                output,
            });
            shape = output;
        }
        Ok(traced)
    }

    pub fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        Ok(self.trace(input)?.last().map_or(input, |l| l.output))
    }
}
