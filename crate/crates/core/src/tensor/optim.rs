use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First/second moment buffers, indexed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: OptimizerState { m: Vec::new(), v: Vec::new(), step: 0 } }
    }

    fn ensure_len(&mut self, store: &ParamStore<T>) {
        for p in &store.raw()[self.state.m.len()..] {
            self.state.m.push(vec![T::zero(); p.value.numel()]);
            self.state.v.push(vec![T::zero(); p.value.numel()]);
        }
    }

    /// Updates every trainable parameter that holds a gradient. Parameters
    /// without a gradient sat out this step and keep their value and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.is_trainable(id) && store.grad(id).is_some())
            .collect();
        self.apply(store, &ids)
    }

    /// Updates exactly `ids`; any of them lacking a gradient is an error.
    pub fn step_params(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", store.name(id))));
        }
        self.apply(store, ids)
    }

    fn apply(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        self.ensure_len(store);
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let bc1: T = T::one() - b1.powi(t);
        let bc2: T = T::one() - b2.powi(t);
        let lr: T = lit(c.lr);
        let eps: T = lit(c.eps);
        let decay: T = T::one() - lr * lit(c.weight_decay);
        let params = store.raw_mut();
        for &id in ids {
            let i = id.index();
            let p = &mut params[i];
            let Some(g) = p.grad.as_ref() else { continue };
            if g.len() != p.value.numel() {
                return Err(Error::Dimension(format!("gradient of {} has wrong length", p.name)));
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Tensor};

    fn store(theta: f64, grad: Option<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", ParamGroup::Decoder, Tensor::scalar(theta)).unwrap();
        if let Some(g) = grad {
            s.accumulate_grad(id, &[g]);
        }
        (s, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = store(0.7, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 0.7);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δθ = −0.1 / (1 + 1e−8).
        let (mut s, id) = store(0.0, Some(1.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
        opt.step(&mut s).unwrap();
        assert!((s.value(id).item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn decay_only_path() {
        let (mut s, id) = store(1.0, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert!((s.value(id).item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut s, id) = store(1.0, None);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step_params(&mut s, &[id]), Err(Error::Contract(_))));
        // the lenient path skips it and still counts the step
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
        opt.step(&mut s).unwrap();
        assert_eq!(opt.state.step, 2);
    }
}
