use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments live on each [`Param`]; this struct
/// only tracks the step count of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Adam {
    pub steps: u64,
}

impl Adam {
    pub fn step(&mut self, cfg: &AdamConfig, params: Vec<&mut Param>) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                let m = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.value[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}
