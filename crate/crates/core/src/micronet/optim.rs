use serde::{Deserialize, Serialize};

use super::net::{Grads, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with ℓ2 regularization folded into the gradient of decayed params.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], cfg: AdamConfig, weight_decay: f64) -> Self {
        Adam {
            cfg,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Param], grads: &Grads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `lr_init` at epoch 0 to 0 at the last epoch.
pub fn cosine_lr(lr_init: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr_init;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    0.5 * lr_init * (1.0 + (std::f64::consts::PI * t).cos())
}
