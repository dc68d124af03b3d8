//! RMSprop with step-decayed learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp { rho: 0.9, eps: 1e-8 }
    }
}

impl RmsProp {
    /// One update of every parameter from its accumulated gradient:
    /// `avg = rho avg + (1 - rho) g^2`, `theta -= lr g / (sqrt(avg) + eps)`.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) {
        let rho = T::from_f64(self.rho);
        let one_minus = T::from_f64(1.0 - self.rho);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr);
        for p in store.iter_mut() {
            for ((x, &g), avg) in p.value.data_mut().iter_mut().zip(&p.grad).zip(&mut p.slot) {
                *avg = rho * *avg + one_minus * g * g;
                *x = *x - lr * g / (avg.sqrt() + eps);
            }
        }
    }
}

/// `lr(epoch) = base * decay^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.every.max(1)) as i32)
    }
}
