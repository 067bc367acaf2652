//! Adam with bias correction over the policy's parameter blocks.

use crate::policy::{Gradient, ParamBlock, PolicyParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: ParamBlock,
    v: ParamBlock,
    t: u64,
}

impl Adam {
    pub fn new(params: &PolicyParams, cfg: AdamConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            m: params.zeros_grad(),
            v: params.zeros_grad(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut PolicyParams, grad: &Gradient) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((theta, g), (m, v)) in params
            .block
            .flat_mut()
            .zip(grad.flat())
            .zip(self.m.flat_mut().zip(self.v.flat_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= self.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        params.step += 1;
    }
}
