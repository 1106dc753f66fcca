//! Adam with optional L2 weight decay.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub weight_decay: f64,
    /// First and second moments, indexed by parameter; `None` until the
    /// parameter first receives a gradient.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteGradient {
    pub param: String,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Adam {
            step: 0,
            weight_decay,
            moments: vec![None; num_params],
        }
    }

    /// One update of every parameter listed in `grads`. Parameters without a
    /// gradient are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &[T])], lr: f64) -> Result<(), NonFiniteGradient> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(NonFiniteGradient {
                param: store.name(*id).to_string(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps, wd) = (T::lit(lr), T::lit(EPSILON), T::lit(self.weight_decay));
        for &(id, grad) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let value = store.get_mut(id);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            for (((p, &g0), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g0 + wd * *p;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
