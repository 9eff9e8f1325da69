use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Element> BatchNorm2d<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            input: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input dims {:?}",
                self.channels(),
                x.dims()
            )));
        }
        Ok(())
    }

    /// Training mode: normalizes with batch statistics and updates the running
    /// estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let stats = batch_stats(x);
        let n = stats.count;
        let momentum = T::of(self.momentum);
        let mut y = Tensor4::zeros(x.dims());
        for q in 0..self.channels() {
            let (mean, var) = (stats.mean[q], stats.var[q]);
            let inv_std = T::one() / (var + T::of(self.eps)).sqrt();
            for b in 0..x.batch() {
                for (o, &v) in y.plane_mut(b, q).iter_mut().zip(x.plane(b, q)) {
                    *o = self.gamma[q] * (v - mean) * inv_std + self.beta[q];
                }
            }
            let unbiased = if n > 1 {
                var * T::of(n as f64 / (n - 1) as f64)
            } else {
                var
            };
            self.running_mean[q] = (T::one() - momentum) * self.running_mean[q] + momentum * mean;
            self.running_var[q] = (T::one() - momentum) * self.running_var[q] + momentum * unbiased;
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Inference mode: a fixed per-channel affine map from running statistics.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let mut y = x.clone();
        for q in 0..self.channels() {
            let inv_std = T::one() / (self.running_var[q] + T::of(self.eps)).sqrt();
            let scale = self.gamma[q] * inv_std;
            let shift = self.beta[q] - self.running_mean[q] * scale;
            for b in 0..x.batch() {
                for v in y.plane_mut(b, q) {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Backward for the last training-mode forward; stores parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::argument("batch norm backward without a training forward"))?;
        let (gx, gg, gb) = batchnorm_backward(self, &x, grad_y)?;
        self.grad_gamma = gg;
        self.grad_beta = gb;
        self.input = Some(x);
        Ok(gx)
    }
}

struct BatchStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

fn batch_stats<T: Element>(x: &Tensor4<T>) -> BatchStats<T> {
    let [bt, c, h, w] = x.dims();
    let count = bt * h * w;
    let n = T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for q in 0..c {
        let mut sum = T::zero();
        for b in 0..bt {
            for &v in x.plane(b, q) {
                sum += v;
            }
        }
        let m = sum / n;
        let mut sq = T::zero();
        for b in 0..bt {
            for &v in x.plane(b, q) {
                sq += (v - m) * (v - m);
            }
        }
        mean[q] = m;
        var[q] = sq / n;
    }
    BatchStats { mean, var, count }
}

/// Gradients of training-mode batch norm at input `x`:
/// `(∂L/∂x, ∂L/∂γ, ∂L/∂β)`.
pub fn batchnorm_backward<T: Element>(
    state: &BatchNorm2d<T>,
    x: &Tensor4<T>,
    grad_y: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    state.check(x)?;
    if grad_y.dims() != x.dims() {
        return Err(Error::shape(format!(
            "batch norm backward: gradient dims {:?}, input dims {:?}",
            grad_y.dims(),
            x.dims()
        )));
    }
    let stats = batch_stats(x);
    let n = T::of(stats.count as f64);
    let c = state.channels();
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for q in 0..c {
        let mean = stats.mean[q];
        let inv_std = T::one() / (stats.var[q] + T::of(state.eps)).sqrt();
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for b in 0..x.batch() {
            for (&g, &v) in grad_y.plane(b, q).iter().zip(x.plane(b, q)) {
                sum_g += g;
                sum_g_xhat += g * (v - mean) * inv_std;
            }
        }
        grad_gamma[q] = sum_g_xhat;
        grad_beta[q] = sum_g;
        let scale = state.gamma[q] * inv_std / n;
        for b in 0..x.batch() {
            let gy = grad_y.plane(b, q);
            let xs = x.plane(b, q);
            for ((o, &g), &v) in grad_x.plane_mut(b, q).iter_mut().zip(gy).zip(xs) {
                let x_hat = (v - mean) * inv_std;
                *o = scale * (n * g - sum_g - x_hat * sum_g_xhat);
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
