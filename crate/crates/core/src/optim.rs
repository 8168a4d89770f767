//! ADAM with per-group learning rates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt64;
use crate::network::{ParamGroup, ParamMut};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub weight: f64,
    pub scale: f64,
    pub selector: f64,
}

impl GroupRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Weight => self.weight,
            ParamGroup::Scale => self.scale,
            ParamGroup::Selector => self.selector,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; parameters without a
    /// gradient keep their value and moments.
    pub fn step(&mut self, params: &mut [ParamMut<'_>], grads: &[Option<Vec<f32>>], rates: &GroupRates) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::State(format!("optimizer state for {} parameters, got {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.data.len() {
                return Err(Error::Contract(format!("gradient of {} has {} values, expected {}", p.name, g.len(), p.data.len())));
            }
            let lr = rates.of(p.group);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j] as f64;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let upd = lr * (m[j] / bc1) / (sqrt64(v[j] / bc2) + c.eps);
                p.data[j] = (p.data[j] as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}
