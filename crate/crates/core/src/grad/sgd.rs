use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.05, momentum: 0.9, steps: 200, batch_size: 1 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with one velocity buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v <- m*v + g; p <- p - lr*v` for each aligned `(param, grad)` pair.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]], cfg: &SgdConfig) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", format!("{} params vs {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                return Err(Error::shape("sgd_step", format!("{:?} vs grad length {}", p.shape(), g.len())));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = cfg.momentum * *vv + gv;
                *pv -= cfg.learning_rate * *vv;
            }
        }
        Ok(())
    }
}
