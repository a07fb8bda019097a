//! Low-rank adaptation of frozen decoder weights.
//!
//! An adapted weight `W` (`a × b`, applied as `x·W`) behaves as
//! `W + (α/r)·B·A` with `B: a × r` initialised to zero and `A: r × b`
//! random, so the adapted model starts out identical to the base model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{argument, Result};
use crate::llm::decoder::DecoderModel;
use crate::params::{uniform_fan_in, ParamStore};

pub const PREFIX: &str = "lora.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub fn down_name(weight: &str) -> String {
    format!("{PREFIX}{weight}.a")
}

pub fn up_name(weight: &str) -> String {
    format!("{PREFIX}{weight}.b")
}

/// Attach LoRA factors to the named base weights. Base parameters are frozen;
/// only the new factors are trainable.
pub fn apply_lora(mut model: DecoderModel, rank: usize, alpha: f64, targets: &[String], seed: u64) -> Result<DecoderModel> {
    if model.lora.is_some() {
        return Err(argument("model already carries LoRA adapters"));
    }
    if rank == 0 {
        return Err(argument("LoRA rank must be at least 1"));
    }
    if targets.is_empty() {
        return Err(argument("LoRA needs at least one target weight"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut added = ParamStore::new();
    for name in targets {
        let w = model
            .params
            .get(name)
            .filter(|p| p.value.nrows() > 1)
            .ok_or_else(|| argument(format!("unknown weight `{name}`")))?;
        let (a, b) = w.value.dim();
        if rank > a.min(b) {
            return Err(argument(format!(
                "rank {rank} exceeds min({a}, {b}) for `{name}`"
            )));
        }
        added.insert(down_name(name), uniform_fan_in(&mut rng, rank, b, a), true);
        added.insert(up_name(name), Mat::zeros((a, rank)), true);
    }
    for (_, p) in model.params.iter_mut() {
        p.trainable = false;
    }
    model.params.extend(added);
    model.lora = Some(LoraSpec {
        rank,
        alpha,
        targets: targets.to_vec(),
    });
    Ok(model)
}

/// `x·W` plus the low-rank update when `weight` is adapted.
pub fn linear(g: &mut Graph, store: &ParamStore, spec: Option<&LoraSpec>, weight: &str, x: Var) -> Var {
    let w = g.param(store, weight);
    let y = g.matmul(x, w);
    match spec {
        Some(s) if store.contains(&up_name(weight)) => {
            let up = g.param(store, &up_name(weight));
            let down = g.param(store, &down_name(weight));
            let xb = g.matmul(x, up);
            let xba = g.matmul(xb, down);
            let delta = g.scale(xba, s.scaling());
            g.add(y, delta)
        }
        _ => y,
    }
}

/// Trainable parameter count `Σ r·(a + b)` over the adapted weights.
pub fn trainable_count(store: &ParamStore, spec: &LoraSpec) -> usize {
    spec.targets
        .iter()
        .filter_map(|t| store.get(t))
        .map(|p| spec.rank * (p.value.nrows() + p.value.ncols()))
        .sum()
}
