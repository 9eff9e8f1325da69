use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Inverted dropout. Training zeroes each element with probability `rate`
/// and scales survivors by `1/(1−rate)`; inference is the identity. The
/// returned mask marks kept elements.
pub fn dropout_forward<T: Element>(
    x: &Tensor4<T>,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<(Tensor4<T>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::argument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), vec![true; x.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = T::of(1.0 / (1.0 - rate));
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() >= rate).collect();
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v * scale } else { T::zero() })
        .collect();
    Ok((Tensor4::new(x.dims(), data)?, mask))
}

pub fn dropout_backward<T: Element>(
    grad_y: &Tensor4<T>,
    mask: &[bool],
    rate: f64,
) -> Result<Tensor4<T>> {
    if mask.len() != grad_y.len() {
        return Err(Error::shape(format!(
            "dropout mask has {} entries, gradient has {}",
            mask.len(),
            grad_y.len()
        )));
    }
    let scale = T::of(1.0 / (1.0 - rate));
    let data = grad_y
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g * scale } else { T::zero() })
        .collect();
    Tensor4::new(grad_y.dims(), data)
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    mask: Vec<bool>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::argument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self {
            rate,
            mask: Vec::new(),
        })
    }

    pub fn forward<T: Element>(
        &mut self,
        x: &Tensor4<T>,
        seed: u64,
        training: bool,
    ) -> Result<Tensor4<T>> {
        let (y, mask) = dropout_forward(x, self.rate, seed, training)?;
        if training {
            self.mask = mask;
        }
        Ok(y)
    }

    pub fn backward<T: Element>(&self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        dropout_backward(grad_y, &self.mask, self.rate)
    }
}
