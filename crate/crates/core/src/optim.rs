//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Mat,
    pub v: Mat,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to every trainable parameter that has a gradient.
    /// Single-row tensors (biases, the log-temperature) are not decayed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Mat>, lr: f64) {
        let c = self.config;
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Mat::zeros(p.value.raw_dim()),
                v: Mat::zeros(p.value.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let decay = if p.value.nrows() > 1 { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|w, m, v, &gi| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * (mh / (vh.sqrt() + c.eps) + decay * *w);
                });
        }
    }
}

pub fn global_norm(grads: &HashMap<String, Mat>) -> f64 {
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    names
        .into_iter()
        .map(|n| grads[n].iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clipping norm.
pub fn clip_global_norm(grads: &mut HashMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("w", array![[1.0, -1.0]], true);
        p.insert("frozen", array![[5.0]], false);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = HashMap::from([
            ("w".to_string(), array![[2.0, -3.0]]),
            ("frozen".to_string(), array![[1.0]]),
        ]);
        opt.step(&mut p, &grads, 0.1);
        let w = &p.get("w").unwrap().value;
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
        assert_eq!(p.get("frozen").unwrap().value[[0, 0]], 5.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = HashMap::from([("a".to_string(), array![[3.0, 4.0]])]);
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
