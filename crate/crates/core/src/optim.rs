//! Adam with bias correction.

use rra_tensor::{Gradients, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Adam {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients of `vars` (as bound by
    /// [`ParamStore::bind`]). Frozen parameters and parameters the loss
    /// did not reach are left alone, moments included.
    pub fn step(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients, lr: f64) -> Result<()> {
        if vars.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(vars[i]) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Config(format!("gradient shape {:?} for {}", g.shape(), p.name)));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
