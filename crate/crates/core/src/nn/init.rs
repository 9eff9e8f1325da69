use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// He-normal initialization: zero mean, standard deviation `sqrt(2/fan_in)`.
pub fn kaiming_init<T: Element>(dims: [usize; 4], fan_in: usize, seed: u64) -> Result<Tensor4<T>> {
    if fan_in == 0 {
        return Err(Error::argument("fan_in must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
    Tensor4::new(dims, data)
}
