use crate::error::{MsfanError, Result};

use super::matrix::Matrix;

/// A trainable tensor together with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub velocity: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            velocity: Matrix::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MsfanError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MsfanError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`, then gradients are zeroed.
///
/// All gradients are checked before any parameter moves, so a non-finite gradient
/// leaves every parameter and velocity untouched.
pub fn sgd_step(params: &mut [&mut Param], cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = params.iter().position(|p| !p.grad.is_finite()) {
        return Err(MsfanError::Numeric(format!(
            "gradient of parameter {i} is not finite; step aborted"
        )));
    }
    for p in params.iter_mut() {
        let Param {
            value,
            grad,
            velocity,
        } = &mut **p;
        for ((w, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut())
        {
            *v = cfg.momentum * *v + g;
            *w -= cfg.learning_rate * *v;
        }
        grad.fill(0.0);
    }
    Ok(())
}
