//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::GradientMap;
use crate::tensor::Tensor;

/// Parameters keyed by stable name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Adds `grads` into the `grad` slot of each named tensor.
    pub fn accumulate(&mut self, grads: &GradientMap) {
        for (name, g) in grads.iter() {
            if let Some(t) = self.tensors.get_mut(name) {
                let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with per-parameter state keyed by name. Learning rates are passed
/// per update so one instance can serve several parameter groups.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, lr: f64, value: &mut [f32], grad: &[f32]) {
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; value.len()],
                v: vec![0.0; value.len()],
                t: 0,
            });
        st.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(st.t);
        let c2 = 1.0 - b2.powi(st.t);
        for i in 0..value.len() {
            let g = grad[i] as f64;
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let step = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.cfg.eps);
            value[i] = (value[i] as f64 - step) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn accumulate_then_reset() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param("w", store.get("w").unwrap().clone());
            let l = g.mean(w);
            store.accumulate(&g.backward(l).unwrap());
        }
        assert_eq!(
            store.get("w").unwrap().grad.as_deref(),
            Some(&[1.0f32, 1.0][..])
        );
        store.zero_grad();
        assert!(store.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut w = [1.0f32, -1.0];
        adam.update("w", 0.1, &mut w, &[2.0, -0.5]);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut w = [5.0f32];
        for _ in 0..2000 {
            let g = [2.0 * w[0]];
            adam.update("w", 0.05, &mut w, &g);
        }
        assert!(w[0].abs() < 1e-2);
    }
}
