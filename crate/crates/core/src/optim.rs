//! AdamW with decoupled weight decay and the warmup-cosine schedule.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let first: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One AdamW update of every trainable parameter from its stored
    /// gradient. Gradients of all parameters are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if p.trainable {
                let decay = if p.decay { weight_decay } else { 0.0 };
                let m = self.first[i].data_mut();
                let v = self.second[i].data_mut();
                let grad = p.grad.data();
                for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[j];
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
                }
            }
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total` steps.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p), true);
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = scalar_store(1.5, 0.0);
        let mut opt = OptimizerState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut s, 0.1);
        assert_eq!(s.get(crate::params::ParamId(0)).value.data(), &[1.5]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1, v = 0.05; mhat = 1, vhat = 1 -> p = 1 - 0.1 * 1/(1 + eps)
        let mut s = scalar_store(1.0, 1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s, 0.1);
        let expected = 1.0 - 0.1 * (0.1 / 0.1) / ((0.05f64 / 0.05).sqrt() + cfg.eps);
        let got = s.get(crate::params::ParamId(0)).value.data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 0.9).abs() < 1e-8);
        assert_eq!(s.get(crate::params::ParamId(0)).grad.data(), &[0.0]);
    }

    #[test]
    fn decoupled_decay_is_multiplicative() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = OptimizerState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.05,
                ..Default::default()
            },
        );
        opt.step(&mut s, 0.1);
        let got = s.get(crate::params::ParamId(0)).value.data()[0];
        assert!((got - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = scalar_store(1.0, 1.0);
        s.get_mut(crate::params::ParamId(0)).trainable = false;
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.1);
        assert_eq!(s.get(crate::params::ParamId(0)).value.data(), &[1.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let base = 3e-4;
        assert_eq!(lr_at(0, base, 10, 110), 0.0);
        assert_eq!(lr_at(5, base, 10, 110), base * 0.5);
        assert_eq!(lr_at(10, base, 10, 110), base);
        assert!((lr_at(60, base, 10, 110) - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_at(110, base, 10, 110), 0.0);
        assert_eq!(lr_at(500, base, 10, 110), 0.0);
    }
}
