use crate::error::{Error, Result};
use crate::tensor::Element;

/// One named parameter tensor and its gradient, as handed to an optimizer.
pub struct ParamGroup<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step, one per parameter group in visitation order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_, T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = groups
                .iter()
                .map(|g| vec![T::zero(); g.value.len()])
                .collect();
            self.second = self.first.clone();
        }
        if groups.len() != self.first.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameter groups, got {}",
                self.first.len(),
                groups.len()
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.value.len() != g.grad.len() || g.value.len() != self.first[i].len() {
                return Err(Error::shape(format!(
                    "parameter `{}`: {} values, {} gradients, {} moments",
                    g.name,
                    g.value.len(),
                    g.grad.len(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_m_b1, one_m_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::of(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (i, g) in groups.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &grad), m), v) in g
                .value
                .iter_mut()
                .zip(g.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_m_b1 * grad;
                *v = b2 * *v + one_m_b2 * grad * grad;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_, T>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = groups
                .iter()
                .map(|g| vec![T::zero(); g.value.len()])
                .collect();
        }
        if groups.len() != self.velocity.len() {
            return Err(Error::shape("parameter group count changed between steps"));
        }
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for (g, vel) in groups.iter_mut().zip(&mut self.velocity) {
            if g.value.len() != g.grad.len() || g.value.len() != vel.len() {
                return Err(Error::shape(format!("parameter `{}` changed size", g.name)));
            }
            for ((p, &grad), v) in g.value.iter_mut().zip(g.grad).zip(vel.iter_mut()) {
                *v = mu * *v + grad;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Element> Optimizer<T> {
    pub fn step(&mut self, groups: &mut [ParamGroup<'_, T>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(groups),
            Optimizer::Sgd(s) => s.step(groups),
        }
    }
}
