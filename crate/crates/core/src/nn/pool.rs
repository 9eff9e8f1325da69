use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

fn pooled_dims(x: [usize; 4], size: usize) -> Result<[usize; 4]> {
    if size == 0 || size > x[2] || size > x[3] {
        return Err(Error::shape(format!(
            "pool size {size} does not fit input dims {x:?}"
        )));
    }
    Ok([x[0], x[1], x[2] / size, x[3] / size])
}

/// Non-overlapping `size×size` max pooling; trailing rows/columns that do
/// not fill a window are ignored.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub size: usize,
    argmax: Vec<usize>,
    input_dims: [usize; 4],
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            argmax: Vec::new(),
            input_dims: [0; 4],
        }
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let dims = pooled_dims(x.dims(), self.size)?;
        let [bt, c, ho, wo] = dims;
        let w = x.width();
        let mut y = Tensor4::zeros(dims);
        let mut argmax = Vec::with_capacity(y.len());
        for b in 0..bt {
            for q in 0..c {
                let plane = x.plane(b, q);
                let out = y.plane_mut(b, q);
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = (i * self.size) * w + j * self.size;
                        for m in 0..self.size {
                            for n in 0..self.size {
                                let idx = (i * self.size + m) * w + j * self.size + n;
                                // first maximum wins
                                if plane[idx] > plane[best] {
                                    best = idx;
                                }
                            }
                        }
                        out[i * wo + j] = plane[best];
                        argmax.push(best);
                    }
                }
            }
        }
        if train {
            self.argmax = argmax;
            self.input_dims = x.dims();
        }
        Ok(y)
    }

    pub fn backward<T: Element>(&self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_y.len() != self.argmax.len()
            || grad_y.dims() != pooled_dims(self.input_dims, self.size)?
        {
            return Err(Error::shape(format!(
                "max pool backward: gradient dims {:?} for input {:?}",
                grad_y.dims(),
                self.input_dims
            )));
        }
        let mut gx = Tensor4::zeros(self.input_dims);
        let [bt, c, ho, wo] = grad_y.dims();
        let mut k = 0;
        for b in 0..bt {
            for q in 0..c {
                let g = grad_y.plane(b, q);
                let plane = gx.plane_mut(b, q);
                for &gv in g.iter().take(ho * wo) {
                    plane[self.argmax[k]] += gv;
                    k += 1;
                }
            }
        }
        Ok(gx)
    }
}

/// Non-overlapping `size×size` average pooling.
#[derive(Clone, Debug)]
pub struct AvgPool2d {
    pub size: usize,
    input_dims: [usize; 4],
}

impl AvgPool2d {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            input_dims: [0; 4],
        }
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let dims = pooled_dims(x.dims(), self.size)?;
        let [bt, c, ho, wo] = dims;
        let w = x.width();
        let inv = T::of(1.0 / (self.size * self.size) as f64);
        let mut y = Tensor4::zeros(dims);
        for b in 0..bt {
            for q in 0..c {
                let plane = x.plane(b, q);
                let out = y.plane_mut(b, q);
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = T::zero();
                        for m in 0..self.size {
                            for n in 0..self.size {
                                acc += plane[(i * self.size + m) * w + j * self.size + n];
                            }
                        }
                        out[i * wo + j] = acc * inv;
                    }
                }
            }
        }
        if train {
            self.input_dims = x.dims();
        }
        Ok(y)
    }

    pub fn backward<T: Element>(&self, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_y.dims() != pooled_dims(self.input_dims, self.size)? {
            return Err(Error::shape(format!(
                "avg pool backward: gradient dims {:?} for input {:?}",
                grad_y.dims(),
                self.input_dims
            )));
        }
        let [bt, c, ho, wo] = grad_y.dims();
        let w = self.input_dims[3];
        let inv = T::of(1.0 / (self.size * self.size) as f64);
        let mut gx = Tensor4::zeros(self.input_dims);
        for b in 0..bt {
            for q in 0..c {
                let g = grad_y.plane(b, q);
                let plane = gx.plane_mut(b, q);
                for i in 0..ho {
                    for j in 0..wo {
                        let share = g[i * wo + j] * inv;
                        for m in 0..self.size {
                            for n in 0..self.size {
                                plane[(i * self.size + m) * w + j * self.size + n] += share;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}
