//! SGD with momentum and the polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Real;

/// `lr0 · (1 − t/t_max)^gamma`, zero from `t_max` on.
pub fn poly_lr(t: usize, t_max: usize, lr0: f64, gamma: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Config("t_max must be positive".into()));
    }
    if t >= t_max {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 - t as f64 / t_max as f64).powf(gamma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `g ← ∇ + λ·θ`, `b ← μ·b + g` (`b ← g` on the first step), `θ ← θ − lr·b`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    buffers: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        if !(cfg.momentum >= 0.0 && cfg.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }
        if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                cfg.weight_decay
            )));
        }
        Ok(Self {
            cfg,
            buffers: Vec::new(),
        })
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Vec::with_capacity(p.len())).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::shape(self.buffers.len(), params.len()));
        }
        let (mu, wd) = (T::from_f64(self.cfg.momentum), T::from_f64(self.cfg.weight_decay));
        let lr = T::from_f64(lr);
        for (p, buf) in params.into_iter().zip(&mut self.buffers) {
            let first = buf.is_empty();
            if first {
                buf.resize(p.len(), T::zero());
            }
            for ((v, &g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                let g = g + wd * *v;
                *b = if first { g } else { mu * *b + g };
                *v -= lr * *b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_end_points() {
        assert_eq!(poly_lr(0, 100, 0.1, 0.9).unwrap(), 0.1);
        assert_eq!(poly_lr(100, 100, 0.1, 0.9).unwrap(), 0.0);
        assert_eq!(poly_lr(250, 100, 0.1, 0.9).unwrap(), 0.0);
        assert!(poly_lr(1, 0, 0.1, 0.9).is_err());
    }

    #[test]
    fn momentum_recursion_by_hand() {
        let mut p = Param::constant("p", vec![1], 1.0f64);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.5,
            weight_decay: 0.1,
        })
        .unwrap();
        p.grad[0] = 2.0;
        opt.step(vec![&mut p], 0.1).unwrap();
        // b = 2 + 0.1·1 = 2.1, θ = 1 − 0.21
        assert!((p.value[0] - 0.79).abs() < 1e-15);
        opt.step(vec![&mut p], 0.1).unwrap();
        // g = 2 + 0.079, b = 1.05 + 2.079
        assert!((p.value[0] - (0.79 - 0.1 * 3.129)).abs() < 1e-15);
    }
}
