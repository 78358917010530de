//! SGD with momentum and weight decay, and cosine annealing.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::models::{Grads, ParamModule};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "momentum must be in [0, 1) and weight decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (0-based) of a cosine anneal from `base` to 0
/// over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / total as f64))
}

/// Momentum buffers for one module. Update rule:
/// `g += wd * p; v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(module: &ParamModule<T>, cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: module.zero_grads(),
        }
    }

    pub fn step(&mut self, module: &mut ParamModule<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (
            T::of(self.cfg.momentum),
            T::of(self.cfg.weight_decay),
            T::of(lr),
        );
        let velocity = &mut self.velocity;
        module.apply_update(|i, p| {
            for ((pv, g), v) in p.iter_mut().zip(&grads[i]).zip(velocity[i].iter_mut()) {
                let d = *g + wd * *pv;
                *v = mu * *v + d;
                *pv -= lr * *v;
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ClassifierHead;
    use alloc::vec;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 9, 10) > 0.0);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut head = ClassifierHead::<f64>::new("h", 1, 2, 0).unwrap();
        head.set(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = Sgd::new(head.module(), cfg);
        let grads = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        opt.step(head.module_mut(), &grads, 0.1).unwrap();
        // v = 0.5 + 0.01 * 1 = 0.51; p = 1 - 0.051
        assert!((head.weight()[0] - 0.949).abs() < 1e-12);
        opt.step(head.module_mut(), &grads, 0.1).unwrap();
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((head.weight()[0] - (0.949 - 0.1 * v2)).abs() < 1e-12);
        // bias also decays: v2 = 0.9 * 1 + 1 + 0.01 * -0.1
        assert!((head.bias()[0] - (-0.1 - 0.1 * 1.899)).abs() < 1e-12);
    }
}
