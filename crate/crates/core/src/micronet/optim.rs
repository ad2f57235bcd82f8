use serde::{Deserialize, Serialize};

use super::layer::{param_slices, param_slices_mut, Layered};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and tied to the model's layer order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<M: Layered + ?Sized>(&mut self, model: &mut M, grads: &M) {
        let gs = param_slices(grads);
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for (((p, g), m), v) in param_slices_mut(model)
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

/// Step learning-rate schedule: `base_lr`, divided by `factor` from
/// `decay_epoch` on (epochs are 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub decay_epoch: usize,
    pub factor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            decay_epoch: 40,
            factor: 10.0,
        }
    }
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch > self.decay_epoch {
            self.base_lr / self.factor
        } else {
            self.base_lr
        }
    }
}
