//! Minibatch optimizers: classical SGD with momentum, and an Adam variant
//! that reuses the momentum coefficient as its first-moment decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v <- mu v + g; theta <- theta - eta v`
    SgdMomentum,
    /// Adam with `beta1 = mu`.
    Adam { beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter buffers for one network's optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Momentum (SGD) or first-moment (Adam) buffers.
    pub velocity: Vec<Tensor<T>>,
    /// Adam second-moment buffers; empty for SGD.
    pub second: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed buffers shaped like `params`.
    pub fn new<'a>(kind: OptimizerKind, lr: f64, momentum: f64, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let velocity: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let second = match kind {
            OptimizerKind::SgdMomentum => Vec::new(),
            OptimizerKind::Adam { .. } => velocity.clone(),
        };
        OptimizerState {
            kind,
            lr,
            momentum,
            velocity,
            second,
            steps: 0,
        }
    }

    /// Apply one update. `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(crate::error::invalid(
                "optimizer",
                alloc::format!("{} parameters registered, {} given", self.velocity.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            let g = grads.get(i).and_then(|g| g.as_ref()).ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() || self.velocity[i].shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.steps += 1;
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].as_ref().unwrap();
                    let v = self.velocity[i].data_mut();
                    for ((w, v), &g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::from_f64_lossy(1.0 - libm::pow(self.momentum, t as f64));
                let c2 = T::from_f64_lossy(1.0 - libm::pow(beta2, t as f64));
                let b2 = T::from_f64_lossy(beta2);
                let eps = T::from_f64_lossy(eps);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].as_ref().unwrap();
                    let m = self.velocity[i].data_mut();
                    let s = self.second[i].data_mut();
                    for (((w, m), s), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g.data()) {
                        *m = mu * *m + (T::one() - mu) * g;
                        *s = b2 * *s + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let sh = *s / c2;
                        *w -= lr * mh / (sh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
