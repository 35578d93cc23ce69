//! Parameter update rules.

use std::collections::HashMap;

use crate::{Array, ParamId, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Array, Array)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their value
    /// (their decay is skipped too). `lr_of` gives each parameter's rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Array>, lr_of: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let lr = lr_of(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array::zeros(g.shape()), Array::zeros(g.shape())));
            let p = store.get_mut(id);
            let decay = 1.0 - lr * self.weight_decay;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step(store: &mut ParamStore, grads: &HashMap<ParamId, Array>, lr_of: impl Fn(ParamId) -> f64) {
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    for id in ids {
        let lr = lr_of(id);
        let p = store.get_mut(id);
        for (pv, gv) in p.data_mut().iter_mut().zip(grads[&id].data()) {
            *pv -= lr * gv;
        }
    }
}
