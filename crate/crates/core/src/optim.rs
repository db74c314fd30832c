//! Adaptive optimizers with decoupled weight decay, plus the warmup/cosine schedule.

use serde::{Deserialize, Serialize};

use crate::params::{round_f32, Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adam moments with decoupled weight decay.
    #[default]
    AdamW,
    /// Momentum-free RMS scaling with decoupled weight decay.
    RmsPropW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "rmspropw" => Ok(OptimizerKind::RmsPropW),
            other => Err(format!(
                "unknown optimizer {other:?} (expected adamw|rmspropw)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer {
            kind,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let g = grads.get(id);
            let p = store.get_mut(id);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let gj = g[j];
                let mut w = p.value[j];
                w -= lr * decay * w;
                match self.kind {
                    OptimizerKind::AdamW => {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        w -= lr * mh / (vh.sqrt() + self.eps);
                    }
                    OptimizerKind::RmsPropW => {
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let vh = v[j] / bc2;
                        w -= lr * gj / (vh.sqrt() + self.eps);
                    }
                }
                p.value[j] = round_f32(w);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        CosineSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
