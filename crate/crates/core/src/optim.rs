//! Adam with the linear-decay step-size schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(alloc::format!(
                "optimizer settings out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Constant step size for the first half, then linear decay towards zero.
/// `step` counts from 0; the last step keeps a small positive rate.
pub fn scheduled_lr(base: f64, step: u64, total: u64) -> f64 {
    let start = total / 2;
    if step < start || total == start {
        return base;
    }
    let span = (total - start) as f64;
    base * (1.0 - (step - start) as f64 / span)
}

/// Moment estimates for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied to each tensor (tensors without gradient are skipped).
    pub steps: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || (0..store.len()).map(|i| Tensor::zeros(store.tensor(i).shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            steps: alloc::vec![0; store.len()],
        }
    }

    /// Applies one update; tensors whose gradient is `None` are left alone.
    /// Returns the Euclidean norm of the applied update.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], cfg: &AdamConfig, lr: f64) -> T {
        assert_eq!(grads.len(), store.len(), "one gradient slot per tensor");
        let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
        let mut norm2 = T::zero();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::of(1.0 - num_traits::Float::powi(cfg.beta1, t));
            let c2 = T::of(1.0 - num_traits::Float::powi(cfg.beta2, t));
            let lr = T::of(lr);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.tensor_mut(i).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                let u = lr * mhat / (vhat.sqrt() + eps);
                p[k] -= u;
                norm2 += u * u;
            }
        }
        norm2.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_is_flat_then_linear() {
        let base = 2e-4;
        for s in [0, 1, 499, 999] {
            assert_eq!(scheduled_lr(base, s, 2000), base);
        }
        assert_eq!(scheduled_lr(base, 1000, 2000), base);
        assert!((scheduled_lr(base, 1500, 2000) - base / 2.0).abs() < 1e-18);
        let last = scheduled_lr(base, 1999, 2000);
        assert!(last > 0.0 && last < base / 500.0);
        let mut prev = base;
        for s in 1000..2000 {
            let lr = scheduled_lr(base, s, 2000);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(scheduled_lr(base, 0, 1), base);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new(0);
        store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let norm = state.step(&mut store, &[Some(vec![3.0, -0.25, 0.0])], &cfg, 0.1);
        let p = store.tensor(0).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
        assert!((norm - 0.1 * 2f64.sqrt()).abs() < 1e-6);
        assert_eq!(state.steps, [1]);
    }

    #[test]
    fn missing_gradient_leaves_tensor_alone() {
        let mut store = ParamStore::<f64>::new(0);
        store.add("a", Tensor::zeros(&[2]));
        store.add("b", Tensor::zeros(&[2]));
        let mut state = AdamState::new(&store);
        state.step(&mut store, &[None, Some(vec![1.0, 1.0])], &AdamConfig::default(), 0.01);
        assert_eq!(store.tensor(0).data(), [0.0, 0.0]);
        assert_eq!(state.steps, [0, 1]);
        assert_eq!(state.m[0].data(), [0.0, 0.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        store.add("x", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { beta1: 0.9, ..Default::default() };
        for _ in 0..2000 {
            let g: Vec<f64> = store.tensor(0).data().iter().map(|x| 2.0 * x).collect();
            state.step(&mut store, &[Some(g)], &cfg, 0.01);
        }
        assert!(store.tensor(0).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { eps: -1.0, ..Default::default() }.validate().is_err());
    }
}
