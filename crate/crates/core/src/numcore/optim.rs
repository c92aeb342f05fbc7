use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum_buf: Tensor,
    pub frozen: bool,
    /// Bias parameters may be exempted from weight decay, see [`SgdConfig::decay_biases`].
    pub is_bias: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum_buf = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            momentum_buf,
            frozen: false,
            is_bias: false,
        }
    }

    pub fn bias(value: Tensor) -> Self {
        Param {
            is_bias: true,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `scale * g` into the gradient accumulator.
    pub fn accumulate(&mut self, g: &Tensor, scale: f64) -> Result<()> {
        self.grad.add_scaled(g, scale)
    }

    /// Clears optimizer state: gradient and momentum.
    pub fn reset_state(&mut self) {
        self.grad.fill(0.0);
        self.momentum_buf.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub decay_biases: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            decay_biases: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with weight decay folded into the gradient.
///
/// For each learnable parameter: `g = grad + wd * value`,
/// `buf = momentum * buf + g`, `value -= lr * buf`. Frozen parameters are not
/// touched. Every gradient is zeroed afterwards.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, cfg: &SgdConfig) {
    for p in params {
        if !p.frozen {
            let wd = if p.is_bias && !cfg.decay_biases {
                0.0
            } else {
                cfg.weight_decay
            };
            let value = p.value.values_mut();
            let buf = p.momentum_buf.values_mut();
            for ((v, b), &g) in value.iter_mut().zip(buf.iter_mut()).zip(p.grad.values()) {
                let g = if wd == 0.0 { g } else { g + wd * *v };
                *b = cfg.momentum * *b + g;
                *v -= cfg.learning_rate * *b;
            }
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor::vector(vec![v]));
        p.grad = Tensor::vector(vec![g]);
        p
    }

    fn cfg(lr: f64, wd: f64, mom: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum: mom,
            decay_biases: true,
        }
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar(1.0, 2.0);
        sgd_step([&mut p], &cfg(0.1, 0.0, 0.0));
        assert_eq!(p.value.values()[0], 1.0 - 0.1 * 2.0);
        assert!((p.value.values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad.values()[0], 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let c = cfg(0.1, 0.0, 0.9);
        let mut p = scalar(1.0, 1.0);
        sgd_step([&mut p], &c);
        assert!((p.momentum_buf.values()[0] - 1.0).abs() < 1e-15);
        assert!((p.value.values()[0] - 0.9).abs() < 1e-15);
        p.grad = Tensor::vector(vec![1.0]);
        sgd_step([&mut p], &c);
        assert!((p.momentum_buf.values()[0] - 1.9).abs() < 1e-15);
        assert!((p.value.values()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_folds_into_gradient() {
        let mut p = scalar(2.0, 0.5);
        sgd_step([&mut p], &cfg(0.1, 0.01, 0.0));
        assert!((p.value.values()[0] - (2.0 - 0.1 * (0.5 + 0.02))).abs() < 1e-15);
    }

    #[test]
    fn bias_decay_exemption_flag() {
        let mut c = cfg(0.1, 0.5, 0.0);
        c.decay_biases = false;
        let mut b = Param::bias(Tensor::vector(vec![1.0]));
        b.grad = Tensor::vector(vec![1.0]);
        let mut w = scalar(1.0, 1.0);
        sgd_step([&mut b, &mut w], &c);
        assert!((b.value.values()[0] - 0.9).abs() < 1e-15);
        assert!((w.value.values()[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn frozen_param_is_bit_identical() {
        let mut p = scalar(0.123456789, 1e6);
        p.frozen = true;
        let before = p.value.clone();
        for _ in 0..5 {
            p.grad = Tensor::vector(vec![-3.0]);
            sgd_step([&mut p], &cfg(0.1, 1e-4, 0.9));
        }
        assert!(p.value.bit_eq(&before));
        assert_eq!(p.grad.values()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(0.1, -1.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.0, 1.0).validate().is_err());
    }
}
