//! Convolution forward and dense backward through im2col / col2im.
//!
//! Layout conventions (all row-major):
//! - `col_X` is `(Bt·Hout·Wout, Cin·K·K)`; row `r` is batch `r / (Hout·Wout)`
//!   at output position `r % (Hout·Wout)` in row scan order, and columns run
//!   channel-major, then kernel row, then kernel column.
//! - `col_W` is `(Cin·K·K, Cout)` with the same column ordering as the rows of
//!   `col_X`. The weight tensor `(Cout, Cin, K, K)` read as a `(Cout, Cin·K·K)`
//!   matrix is exactly `col_Wᵀ`, which is what the kernels below use.
//! - `col[∂L/∂Y]` is `(Bt·Hout·Wout, Cout)`.
//!
//! Padding is virtual: out-of-range reads are zero and col2im drops
//! contributions that land on padding.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_tn, Element, Matrix, Tensor4};

/// Square-kernel convolution hyperparameters. Dilation and groups are fixed
/// at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::argument("kernel size must be at least 1"));
        }
        if stride == 0 {
            return Err(Error::argument("stride must be at least 1"));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// `(H + 2p − K)/s + 1`, rejected unless it is an exact positive integer.
    pub fn output_len(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape(format!(
                "input extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        let span = padded - self.kernel;
        if !span.is_multiple_of(self.stride) {
            return Err(Error::shape(format!(
                "({input} + 2*{} - {}) is not divisible by stride {}",
                self.padding, self.kernel, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }

    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok((self.output_len(height)?, self.output_len(width)?))
    }
}

/// Convolution parameters: weights `(Cout, Cin, K, K)` and bias `(Cout)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    weights: Tensor4<T>,
    bias: Vec<T>,
    geometry: ConvGeometry,
}

/// Gradients of one convolution call.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGradients<T> {
    pub grad_weights: Tensor4<T>,
    pub grad_bias: Vec<T>,
    pub grad_input: Tensor4<T>,
}

impl<T: Element> ConvLayer<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>, geometry: ConvGeometry) -> Result<Self> {
        let [c_out, _, kh, kw] = weights.dims();
        if kh != geometry.kernel || kw != geometry.kernel {
            return Err(Error::shape(format!(
                "weights dims {:?} do not match kernel size {}",
                weights.dims(),
                geometry.kernel
            )));
        }
        if bias.len() != c_out {
            return Err(Error::shape(format!(
                "bias length {} does not match {c_out} output channels",
                bias.len()
            )));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::argument("convolution parameters must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            geometry,
        })
    }

    pub fn weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Weights and bias borrowed mutably together.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.weights.data_mut(), &mut self.bias)
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    /// `(Bt, Cout, Hout, Wout)` for an input of the given dims.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        if input[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, layer expects {}",
                input[1],
                self.in_channels()
            )));
        }
        let (h, w) = self.geometry.output_hw(input[2], input[3])?;
        Ok([input[0], self.out_channels(), h, w])
    }

    /// Weight tensor viewed as `(Cout, Cin·K·K)`, i.e. `col_Wᵀ`.
    pub fn weight_rows(&self) -> Matrix<T> {
        let c_out = self.out_channels();
        let n = self.weights.len() / c_out.max(1);
        Matrix::new(c_out, n, self.weights.data().to_vec()).expect("weight dims are consistent")
    }

    /// `col_W` in `(Cin·K·K, Cout)` layout.
    pub fn col_weights(&self) -> Matrix<T> {
        self.weight_rows().transpose()
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out_dims = self.output_dims(x.dims())?;
        let cols = im2col(x, self.geometry)?;
        let col_y = matmul(&cols, &self.col_weights())?;
        Ok(cols_to_output(&col_y, out_dims, Some(&self.bias)))
    }

    pub fn backward_dense(&self, x: &Tensor4<T>, grad_y: &Tensor4<T>) -> Result<ConvGradients<T>> {
        let cols = im2col(x, self.geometry)?;
        self.backward_dense_from_cols(&cols, x.dims(), grad_y)
    }

    /// Dense backward reusing a `col_X` computed by an earlier forward.
    pub fn backward_dense_from_cols(
        &self,
        cols: &Matrix<T>,
        x_dims: [usize; 4],
        grad_y: &Tensor4<T>,
    ) -> Result<ConvGradients<T>> {
        let all: Vec<usize> = (0..self.out_channels()).collect();
        self.backward_retained(cols, x_dims, grad_y, &all)
    }

    /// Backward restricted to the `retained` output channels (sorted,
    /// distinct). The columnized output gradient and `col_W` are shrunk to
    /// those channels before multiplying; every other channel gets exactly
    /// zero weight and bias gradient.
    pub(crate) fn backward_retained(
        &self,
        cols: &Matrix<T>,
        x_dims: [usize; 4],
        grad_y: &Tensor4<T>,
        retained: &[usize],
    ) -> Result<ConvGradients<T>> {
        let out_dims = self.output_dims(x_dims)?;
        if grad_y.dims() != out_dims {
            return Err(Error::shape(format!(
                "output gradient dims {:?} do not match forward output {:?}",
                grad_y.dims(),
                out_dims
            )));
        }
        let k = self.geometry.kernel;
        let patch = x_dims[1] * k * k;
        if cols.rows() != out_dims[0] * out_dims[2] * out_dims[3] || cols.cols() != patch {
            return Err(Error::shape(format!(
                "col_X is {}x{}, geometry needs {}x{patch}",
                cols.rows(),
                cols.cols(),
                out_dims[0] * out_dims[2] * out_dims[3]
            )));
        }
        let c_out = self.out_channels();
        let grad_cols = output_to_cols(grad_y, retained);
        let weight_rows = self.weight_rows();
        let shrunk_weights = if retained.len() == c_out {
            weight_rows
        } else {
            weight_rows.select_rows(retained)
        };

        // (C'out, Cin·K·K) rows of ∂L/∂W, scattered back to full channels.
        let grad_w_rows = matmul_tn(&grad_cols, cols)?;
        let mut grad_weights = Tensor4::zeros(self.weights.dims());
        for (row, &q) in retained.iter().enumerate() {
            grad_weights.data_mut()[q * patch..(q + 1) * patch]
                .copy_from_slice(grad_w_rows.row(row));
        }

        let mut grad_bias = vec![T::zero(); c_out];
        for &q in retained {
            let mut acc = T::zero();
            for b in 0..out_dims[0] {
                for &v in grad_y.plane(b, q) {
                    acc += v;
                }
            }
            grad_bias[q] = acc;
        }

        let grad_x_cols = matmul(&grad_cols, &shrunk_weights)?;
        let grad_input = col2im(&grad_x_cols, x_dims, self.geometry)?;
        Ok(ConvGradients {
            grad_weights,
            grad_bias,
            grad_input,
        })
    }
}

/// Free-function form of [`ConvLayer::forward`].
pub fn conv_forward<T: Element>(layer: &ConvLayer<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    layer.forward(x)
}

/// Free-function form of [`ConvLayer::backward_dense`].
pub fn conv_backward_dense<T: Element>(
    layer: &ConvLayer<T>,
    x: &Tensor4<T>,
    grad_y: &Tensor4<T>,
) -> Result<ConvGradients<T>> {
    layer.backward_dense(x, grad_y)
}

/// Stretches every convolution window of `x` into one row.
pub fn im2col<T: Element>(x: &Tensor4<T>, geometry: ConvGeometry) -> Result<Matrix<T>> {
    let [bt, c_in, h, w] = x.dims();
    let (h_out, w_out) = geometry.output_hw(h, w)?;
    let k = geometry.kernel;
    let (s, p) = (geometry.stride as isize, geometry.padding as isize);
    let patch = c_in * k * k;
    let mut data = vec![T::zero(); bt * h_out * w_out * patch];
    let mut rows = data.chunks_exact_mut(patch.max(1));
    for b in 0..bt {
        for i in 0..h_out {
            for j in 0..w_out {
                let row = match rows.next() {
                    Some(row) => row,
                    None => break,
                };
                let top = i as isize * s - p;
                let left = j as isize * s - p;
                let mut col = 0;
                for c in 0..c_in {
                    let plane = x.plane(b, c);
                    for m in 0..k {
                        let y = top + m as isize;
                        let inside_row = y >= 0 && (y as usize) < h;
                        for n in 0..k {
                            let xw = left + n as isize;
                            if inside_row && xw >= 0 && (xw as usize) < w {
                                row[col] = plane[y as usize * w + xw as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Matrix::new(bt * h_out * w_out, patch, data)
}

/// Adjoint of [`im2col`]: sums every row entry back onto the input position
/// it was read from.
pub fn col2im<T: Element>(
    g: &Matrix<T>,
    x_dims: [usize; 4],
    geometry: ConvGeometry,
) -> Result<Tensor4<T>> {
    let [bt, c_in, h, w] = x_dims;
    let (h_out, w_out) = geometry.output_hw(h, w)?;
    let k = geometry.kernel;
    let patch = c_in * k * k;
    if g.rows() != bt * h_out * w_out || g.cols() != patch {
        return Err(Error::shape(format!(
            "col2im: matrix is {}x{}, geometry needs {}x{patch}",
            g.rows(),
            g.cols(),
            bt * h_out * w_out
        )));
    }
    let (s, p) = (geometry.stride as isize, geometry.padding as isize);
    let mut out = Tensor4::zeros(x_dims);
    let mut r = 0;
    for b in 0..bt {
        for i in 0..h_out {
            for j in 0..w_out {
                let row = g.row(r);
                r += 1;
                let top = i as isize * s - p;
                let left = j as isize * s - p;
                let mut col = 0;
                for c in 0..c_in {
                    let plane = out.plane_mut(b, c);
                    for m in 0..k {
                        let y = top + m as isize;
                        let inside_row = y >= 0 && (y as usize) < h;
                        for n in 0..k {
                            let xw = left + n as isize;
                            if inside_row && xw >= 0 && (xw as usize) < w {
                                plane[y as usize * w + xw as usize] += row[col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `col[t]` restricted to `channels`: `(Bt·H·W, channels.len())`.
pub fn output_to_cols<T: Element>(t: &Tensor4<T>, channels: &[usize]) -> Matrix<T> {
    let [bt, _, h, w] = t.dims();
    let hw = h * w;
    let kept = channels.len();
    let mut data = vec![T::zero(); bt * hw * kept];
    for b in 0..bt {
        let block = &mut data[b * hw * kept..(b + 1) * hw * kept];
        for (col, &q) in channels.iter().enumerate() {
            for (pos, &v) in t.plane(b, q).iter().enumerate() {
                block[pos * kept + col] = v;
            }
        }
    }
    Matrix::new(bt * hw, kept, data).expect("column layout is consistent")
}

/// Reshapes `(Bt·H·W, C)` back to `(Bt, C, H, W)`, adding a per-channel
/// bias when given.
pub fn cols_to_output<T: Element>(
    cols: &Matrix<T>,
    dims: [usize; 4],
    bias: Option<&[T]>,
) -> Tensor4<T> {
    let [bt, c, h, w] = dims;
    let hw = h * w;
    let mut out = Tensor4::zeros(dims);
    for b in 0..bt {
        for q in 0..c {
            let add = bias.map_or(T::zero(), |bias| bias[q]);
            let plane = out.plane_mut(b, q);
            for (pos, v) in plane.iter_mut().enumerate() {
                *v = cols.get(b * hw + pos, q) + add;
            }
        }
    }
    out
}
