use std::collections::BTreeMap;

use ndarray::Array2;

use crate::params::{Gradients, ParamStore};
use crate::Matrix;

/// Hyper-parameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adaptive-moment optimiser with decoupled weight decay.
///
/// Moments are keyed by parameter name so optimiser state survives a
/// save/load cycle even if the store is rebuilt in a different order.
/// Single-row parameters (biases, gains) are not decayed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Matrix>,
    pub second: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, ..Default::default() }
    }

    /// Applies one update with learning rate `lr` (overriding the configured
    /// one, so callers can run warmup schedules).
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let name = store.name(id).to_string();
            let param = store.get_mut(id);
            let m = self.first.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.second.entry(name).or_insert_with(|| Array2::zeros(g.dim()));
            let decay = if param.nrows() > 1 { weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *param).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use ndarray::array;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let grads = {
                let tape = Tape::new(&store);
                let loss = tape.param(x).add_scalar(-1.0).square().sum();
                tape.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        let v = store.get(x);
        assert!((v[[0, 0]] - 1.0).abs() < 1e-2 && (v[[0, 1]] - 1.0).abs() < 1e-2, "{v}");
        assert_eq!(opt.step, 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let x = store.insert("x", array![[0.0]]);
        let mut grads = Gradients::new();
        grads.by_param.insert(x, array![[123.0]]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, eps: 0.0, ..Default::default() });
        opt.step(&mut store, &grads);
        assert!((store.get(x)[[0, 0]] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = Gradients::new();
        grads.by_param.insert(crate::ParamId(0), array![[3.0, 4.0]]);
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
