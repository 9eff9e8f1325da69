use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_tn, Element, Matrix, Tensor4};

/// Fully connected layer over flattened `(C, H, W)` features; output dims are
/// `(Bt, out, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `(out, in)` row-major.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub grad_weight: Matrix<T>,
    pub grad_bias: Vec<T>,
    input: Option<(Matrix<T>, [usize; 4])>,
}

impl<T: Element> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "linear bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            grad_weight: Matrix::zeros(weight.rows(), weight.cols()),
            grad_bias: vec![T::zero(); bias.len()],
            weight,
            bias,
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    fn flatten(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        let features = x.len() / x.batch().max(1);
        if features != self.in_features() {
            return Err(Error::shape(format!(
                "linear layer expects {} features, input dims {:?}",
                self.in_features(),
                x.dims()
            )));
        }
        Matrix::new(x.batch(), features, x.data().to_vec())
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let flat = self.flatten(x)?;
        let mut y = matmul(&flat, &self.weight.transpose())?;
        let out = self.out_features();
        for row in y.data_mut().chunks_exact_mut(out) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        if train {
            self.input = Some((flat, x.dims()));
        }
        Tensor4::new([x.batch(), out, 1, 1], y.into_vec())
    }

    pub fn backward(&mut self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (flat, dims) = self
            .input
            .as_ref()
            .ok_or_else(|| Error::argument("linear backward without a training forward"))?;
        if grad_y.dims() != [dims[0], self.out_features(), 1, 1] {
            return Err(Error::shape(format!(
                "linear backward: gradient dims {:?} for batch {}",
                grad_y.dims(),
                dims[0]
            )));
        }
        let g = Matrix::new(dims[0], self.out_features(), grad_y.data().to_vec())?;
        self.grad_weight = matmul_tn(&g, flat)?;
        let mut gb = vec![T::zero(); self.out_features()];
        for row in g.data().chunks_exact(self.out_features()) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        self.grad_bias = gb;
        let gx = matmul(&g, &self.weight)?;
        Tensor4::new(*dims, gx.into_vec())
    }
}
