//! AdamW with decoupled weight decay. First/second moment buffers are keyed
//! by parameter name in a sorted map so checkpoint serialization is
//! deterministic.

use std::collections::BTreeMap;

use super::Module;

/// Per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Weight decay is applied directly to the values, outside the moment
    /// estimates.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let state = &mut self.state;
        model.visit_params(&mut |p| {
            let entry = state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            });
            assert_eq!(entry.m.len(), p.numel(), "moment size for {}", p.name);
            for i in 0..p.numel() {
                let g = p.grad[i];
                entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g;
                entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                p.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.value[i]);
            }
        });
    }
}
