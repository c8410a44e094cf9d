//! Adam over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grad.len(), self.m.len(), "gradient count");
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] + c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut opt = Adam::new(AdamConfig::default(), 3);
        opt.update(&mut p, &[0.3, -4.0, 0.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![3.0, -1.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![0.7; 4];
        let mut opt = Adam::new(AdamConfig::default(), 4);
        opt.update(&mut p, &[0.0; 4]);
        assert_eq!(p, vec![0.7; 4]);
    }
}
