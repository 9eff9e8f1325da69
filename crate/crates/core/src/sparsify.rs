//! Top-K gradient selection for the convolution backward pass.
//!
//! The output gradient is reduced to an importance vector (mean absolute
//! value over the averaged dimensions), the K most important units are kept,
//! and the backward product runs on the shrunk columnized gradient. Dropped
//! channels get exactly zero weight and bias gradient.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{im2col, ConvGradients, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Matrix, Tensor4};

/// Which units of `∂L/∂Y` compete for retention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsifyMode {
    /// Output channels, importance averaged over batch, height and width.
    #[default]
    Channel,
    /// Spatial positions, averaged over batch and channels.
    HeightWidth,
    /// Every `(channel, row, col)` unit, averaged over the batch.
    All,
    /// Output channels drawn uniformly at random; importance is ignored.
    RandomChannel,
}

impl SparsifyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SparsifyMode::Channel => "channel",
            SparsifyMode::HeightWidth => "height-width",
            SparsifyMode::All => "all",
            SparsifyMode::RandomChannel => "random-channel",
        }
    }
}

impl fmt::Display for SparsifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SparsifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(SparsifyMode::Channel),
            "height-width" => Ok(SparsifyMode::HeightWidth),
            "all" => Ok(SparsifyMode::All),
            "random-channel" => Ok(SparsifyMode::RandomChannel),
            other => Err(Error::argument(format!("unknown sparsify mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsifyPolicy {
    mode: SparsifyMode,
    drop_rate: f64,
    seed: u64,
}

impl SparsifyPolicy {
    pub fn new(mode: SparsifyMode, drop_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::argument(format!(
                "drop rate must lie in [0, 1), got {drop_rate}"
            )));
        }
        Ok(Self {
            mode,
            drop_rate,
            seed,
        })
    }

    pub fn channel(drop_rate: f64) -> Result<Self> {
        Self::new(SparsifyMode::Channel, drop_rate, 0)
    }

    pub fn mode(&self) -> SparsifyMode {
        self.mode
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Retained unit indices (sorted, distinct) out of `total`.
///
/// For the channel modes the indices are output channels; for
/// `HeightWidth` they are flattened positions `i·Wout + j`; for `All` they
/// are `q·Hout·Wout + i·Wout + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    retained: Vec<usize>,
    total: usize,
}

impl ChannelMask {
    pub fn new(mut retained: Vec<usize>, total: usize) -> Result<Self> {
        retained.sort_unstable();
        retained.dedup();
        if retained.is_empty()
            || retained.len() > total
            || retained.last().is_some_and(|&i| i >= total)
        {
            return Err(Error::argument(format!(
                "mask must retain between 1 and {total} valid indices"
            )));
        }
        Ok(Self { retained, total })
    }

    pub fn full(total: usize) -> Self {
        Self {
            retained: (0..total).collect(),
            total,
        }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_full(&self) -> bool {
        self.retained.len() == self.total
    }

    /// Indices not retained, ascending.
    pub fn dropped(&self) -> Vec<usize> {
        let mut keep = self.retained.iter().peekable();
        (0..self.total)
            .filter(|i| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

/// Mean absolute value of `grad_y` over the dimensions `mode` averages.
pub fn channel_importance<T: Element>(grad_y: &Tensor4<T>, mode: SparsifyMode) -> Result<Vec<T>> {
    if grad_y.is_empty() {
        return Err(Error::shape(format!(
            "importance needs a non-empty gradient, got dims {:?}",
            grad_y.dims()
        )));
    }
    let [bt, c, h, w] = grad_y.dims();
    let hw = h * w;
    let importance = match mode {
        SparsifyMode::Channel | SparsifyMode::RandomChannel => {
            let n = T::of((bt * hw) as f64);
            (0..c)
                .map(|q| {
                    let mut acc = T::zero();
                    for b in 0..bt {
                        for &v in grad_y.plane(b, q) {
                            acc += v.abs();
                        }
                    }
                    acc / n
                })
                .collect()
        }
        SparsifyMode::HeightWidth => {
            let mut acc = vec![T::zero(); hw];
            for b in 0..bt {
                for q in 0..c {
                    for (a, &v) in acc.iter_mut().zip(grad_y.plane(b, q)) {
                        *a += v.abs();
                    }
                }
            }
            let n = T::of((bt * c) as f64);
            acc.into_iter().map(|a| a / n).collect()
        }
        SparsifyMode::All => {
            let unit = c * hw;
            let mut acc = vec![T::zero(); unit];
            for sample in grad_y.data().chunks_exact(unit) {
                for (a, &v) in acc.iter_mut().zip(sample) {
                    *a += v.abs();
                }
            }
            let n = T::of(bt as f64);
            acc.into_iter().map(|a| a / n).collect()
        }
    };
    Ok(importance)
}

/// `K = c_out − floor(d·c_out)`, never below 1.
pub fn retained_count(c_out: usize, drop_rate: f64) -> usize {
    let dropped = (drop_rate * c_out as f64).floor() as usize;
    c_out.saturating_sub(dropped).max(1).min(c_out.max(1))
}

/// Picks `k` of the `importance.len()` units: the largest values (ties to
/// the lower index) or, for `RandomChannel`, a seeded uniform draw.
pub fn select_channels<T: Element>(
    importance: &[T],
    k: usize,
    policy: &SparsifyPolicy,
) -> Result<ChannelMask> {
    let n = importance.len();
    if k == 0 || k > n {
        return Err(Error::argument(format!("cannot retain {k} of {n} units")));
    }
    let retained = match policy.mode {
        SparsifyMode::RandomChannel => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
        _ => {
            let mut order: Vec<usize> = (0..n).collect();
            // Stable sort keeps lower indices first among equal values.
            order.sort_by(|&a, &b| importance[b].as_f64().total_cmp(&importance[a].as_f64()));
            order.truncate(k);
            order
        }
    };
    ChannelMask::new(retained, n)
}

/// Sparse backward from the raw input.
pub fn sparse_conv_backward<T: Element>(
    layer: &ConvLayer<T>,
    x: &Tensor4<T>,
    grad_y: &Tensor4<T>,
    policy: &SparsifyPolicy,
) -> Result<(ConvGradients<T>, ChannelMask)> {
    let cols = im2col(x, layer.geometry())?;
    sparse_conv_backward_from_cols(layer, &cols, x.dims(), grad_y, policy)
}

/// Sparse backward reusing the forward pass's `col_X`.
pub fn sparse_conv_backward_from_cols<T: Element>(
    layer: &ConvLayer<T>,
    cols: &Matrix<T>,
    x_dims: [usize; 4],
    grad_y: &Tensor4<T>,
    policy: &SparsifyPolicy,
) -> Result<(ConvGradients<T>, ChannelMask)> {
    let out_dims = layer.output_dims(x_dims)?;
    if grad_y.dims() != out_dims {
        return Err(Error::shape(format!(
            "output gradient dims {:?} do not match forward output {:?}",
            grad_y.dims(),
            out_dims
        )));
    }
    let importance = channel_importance(grad_y, policy.mode)?;
    let k = retained_count(importance.len(), policy.drop_rate);
    let mask = select_channels(&importance, k, policy)?;
    let grads = match policy.mode {
        SparsifyMode::Channel | SparsifyMode::RandomChannel => {
            layer.backward_retained(cols, x_dims, grad_y, mask.retained())?
        }
        // Positional masks do not shrink the channel dimension; the dropped
        // units are zeroed and the full product runs.
        SparsifyMode::HeightWidth | SparsifyMode::All => {
            let masked = zero_units(grad_y, &mask, policy.mode);
            layer.backward_dense_from_cols(cols, x_dims, &masked)?
        }
    };
    Ok((grads, mask))
}

/// Copy of `grad_y` with every unit outside `mask` set to zero.
pub fn zero_units<T: Element>(
    grad_y: &Tensor4<T>,
    mask: &ChannelMask,
    mode: SparsifyMode,
) -> Tensor4<T> {
    let [bt, c, h, w] = grad_y.dims();
    let hw = h * w;
    let mut out = grad_y.clone();
    for unit in mask.dropped() {
        for b in 0..bt {
            match mode {
                SparsifyMode::Channel | SparsifyMode::RandomChannel => {
                    out.plane_mut(b, unit).fill(T::zero());
                }
                SparsifyMode::HeightWidth => {
                    for q in 0..c {
                        out.plane_mut(b, q)[unit] = T::zero();
                    }
                }
                SparsifyMode::All => {
                    out.data_mut()[b * c * hw + unit] = T::zero();
                }
            }
        }
    }
    out
}
