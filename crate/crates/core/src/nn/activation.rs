use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Vec<bool>,
    dims: [usize; 4],
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor4<T>, train: bool) -> Tensor4<T> {
        if train {
            self.active = x.data().iter().map(|&v| v > T::zero()).collect();
            self.dims = x.dims();
        }
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Element>(&self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_y.dims() != self.dims || self.active.len() != grad_y.len() {
            return Err(Error::shape(format!(
                "relu backward: gradient dims {:?}, forward dims {:?}",
                grad_y.dims(),
                self.dims
            )));
        }
        let data = grad_y
            .data()
            .iter()
            .zip(&self.active)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor4::new(self.dims, data)
    }
}
