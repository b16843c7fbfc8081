//! Adam optimizer and the warmup + cosine-annealing learning-rate schedule.

use std::collections::HashMap;

use crate::nn::ParamStore;
use crate::Real;

const BETA1: Real = 0.9;
const BETA2: Real = 0.999;
const ADAM_EPS: Real = 1e-8;

/// Adam with first-step bias correction and additive weight decay
/// (`grad + wd * w`). State is keyed by parameter name; update order
/// follows store insertion order, so runs are deterministic.
#[derive(Debug, Default)]
pub struct Adam {
    t: u64,
    slots: HashMap<String, (Vec<Real>, Vec<Real>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advance the shared timestep; call once per optimization step before
    /// updating parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter array in place.
    pub fn update(
        &mut self,
        name: &str,
        values: &mut [Real],
        grad: &[Real],
        lr: Real,
        weight_decay: Real,
    ) {
        assert!(self.t > 0, "call begin_step before update");
        assert_eq!(values.len(), grad.len(), "{name}");
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; values.len()], vec![0.0; values.len()]));
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..values.len() {
            let g = grad[i] + weight_decay * values[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    /// Update every learnable entry of a store from a name -> grad map
    /// (missing grads are skipped). `prefix` namespaces the optimizer state
    /// when several stores share one optimizer.
    pub fn step_store(
        &mut self,
        prefix: &str,
        store: &mut ParamStore,
        grads: &HashMap<String, Vec<Real>>,
        lr: Real,
        weight_decay: Real,
    ) {
        let mut names: Vec<String> = Vec::new();
        for e in store.iter() {
            if e.learnable && grads.contains_key(&e.name) {
                names.push(e.name.clone());
            }
        }
        for name in names {
            let full = format!("{prefix}/{name}");
            let grad = &grads[&name];
            let mut values = store.values(&name).to_vec();
            self.update(&full, &mut values, grad, lr, weight_decay);
            store.set_values(&name, values);
        }
    }
}

/// Learning rate at `epoch`: linear warmup from zero over `warmup` epochs,
/// then cosine annealing to zero over the remaining epochs.
pub fn lr_at(epoch: usize, total_epochs: usize, warmup: usize, base_lr: Real) -> Real {
    debug_assert!(epoch < total_epochs, "epoch out of range");
    if warmup > 0 && epoch < warmup {
        return base_lr * epoch as Real / warmup as Real;
    }
    let span = total_epochs.saturating_sub(warmup);
    if span <= 1 {
        return base_lr;
    }
    let progress = (epoch - warmup) as Real / span as Real;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * progress).cos())
}
