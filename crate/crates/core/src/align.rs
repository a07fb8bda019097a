//! Visual-text alignment: symmetric softmax contrastive loss between pooled
//! sign features and pooled target-text embeddings, with a learnable
//! temperature.
//!
//! For a batch of `B` unit sign vectors `z_i` and unit text vectors `t_i`,
//!
//! ```text
//! L = -1/(2B) Σ_i [ log softmax_j(τ z_i·t_j)[i] + log softmax_j(τ z_j·t_i)[i] ]
//! ```
//!
//! `τ` is stored as `log τ` so it stays positive under unconstrained updates.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::adapter;
use crate::autograd::{Graph, Mat, Var};
use crate::error::{argument, Error, Result};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::trainer::BatchSampler;

pub const LOG_TAU: &str = "align.log_tau";
const UNIT_TOL: f64 = 1e-6;

/// `log(1/0.07)`, the usual contrastive starting temperature.
pub fn initial_log_tau() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Insert a fresh trainable log-temperature.
pub fn init_temperature(store: &mut ParamStore) {
    store.insert(LOG_TAU, Mat::from_elem((1, 1), initial_log_tau()), true);
}

pub fn temperature(store: &ParamStore) -> Option<f64> {
    store.get(LOG_TAU).map(|p| p.value[[0, 0]].exp())
}

/// Mean over rows, then L2 normalisation.
pub fn pool_and_normalize(seq: &Mat) -> Result<Array1<f64>> {
    if seq.nrows() == 0 {
        return Err(argument("cannot pool an empty sequence"));
    }
    let mean = seq.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let norm = mean.dot(&mean).sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::Degenerate(format!("pooled vector has norm {norm}")));
    }
    Ok(mean / norm)
}

/// Graph version of [`pool_and_normalize`]; yields a `1 × d` row.
pub fn pool_and_normalize_var(g: &mut Graph, seq: Var) -> Result<Var> {
    if g.value(seq).nrows() == 0 {
        return Err(argument("cannot pool an empty sequence"));
    }
    let m = g.mean_rows(seq);
    let norm = g.value(m).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::Degenerate(format!("pooled vector has norm {norm}")));
    }
    Ok(g.l2_normalize_rows(m))
}

/// Paired unit vectors; row `i` of `sign` matches row `i` of `text`.
#[derive(Clone, Debug)]
pub struct AlignBatch {
    pub sign: Mat,
    pub text: Mat,
}

impl AlignBatch {
    pub fn new(sign: Mat, text: Mat) -> Result<Self> {
        if sign.nrows() == 0 {
            return Err(argument("alignment batch is empty"));
        }
        if sign.dim() != text.dim() {
            return Err(argument(format!(
                "sign batch {:?} and text batch {:?} differ in shape",
                sign.dim(),
                text.dim()
            )));
        }
        for (which, m) in [("sign", &sign), ("text", &text)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{which} vectors contain non-finite values")));
            }
            for (i, row) in m.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(argument(format!("{which} vector {i} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self { sign, text })
    }

    pub fn len(&self) -> usize {
        self.sign.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.sign.nrows() == 0
    }
}

/// Contrastive loss on graph nodes. `sign` and `text` are `B × d` with unit
/// rows; `log_tau` is `1 × 1`.
pub fn contrastive_loss(g: &mut Graph, sign: Var, text: Var, log_tau: Var) -> Var {
    let b = g.value(sign).nrows();
    let tau = g.exp(log_tau);
    let tt = g.transpose(text);
    let sim = g.matmul(sign, tt);
    let logits = g.scale_by(sim, tau);
    let diag: Vec<usize> = (0..b).collect();
    let s2t = g.log_softmax_rows(logits);
    let s2t = g.nll_mean(s2t, &diag);
    let lt = g.transpose(logits);
    let t2s = g.log_softmax_rows(lt);
    let t2s = g.nll_mean(t2s, &diag);
    let both = g.add(s2t, t2s);
    g.scale(both, 0.5)
}

/// Evaluate the loss for a validated batch at temperature `tau`.
pub fn vt_align_loss(batch: &AlignBatch, tau: f64) -> Result<f64> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Numeric(format!("temperature must be positive and finite, got {tau}")));
    }
    let mut g = Graph::new();
    let s = g.constant(batch.sign.clone());
    let t = g.constant(batch.text.clone());
    let lt = g.constant(Mat::from_elem((1, 1), tau.ln()));
    let l = contrastive_loss(&mut g, s, t, lt);
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("alignment loss is {v}")));
    }
    Ok(v)
}

/// Pooled, normalised text vector of a token sequence under the embedding table.
pub fn text_vector_var(g: &mut Graph, table: Var, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(argument("target token sequence is empty"));
    }
    let rows = g.gather_rows(table, tokens);
    pool_and_normalize_var(g, rows)
}

/// Precomputed, frozen-encoder features for one training pair.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub spatial: Mat,
    pub motion: Mat,
    pub target: Vec<usize>,
}

/// Alignment loss of a batch given each sample's `Z_sm` node.
pub fn batch_loss_from_sign(
    g: &mut Graph,
    store: &ParamStore,
    table: Var,
    sign_seqs: &[Var],
    targets: &[&[usize]],
) -> Result<Var> {
    let mut signs = Vec::with_capacity(sign_seqs.len());
    let mut texts = Vec::with_capacity(sign_seqs.len());
    for (seq, target) in sign_seqs.iter().zip(targets) {
        signs.push(pool_and_normalize_var(g, *seq)?);
        texts.push(text_vector_var(g, table, target)?);
    }
    let s = g.concat_rows(&signs);
    let t = g.concat_rows(&texts);
    let lt = g.param(store, LOG_TAU);
    Ok(contrastive_loss(g, s, t, lt))
}

/// Run the adapter on every pair and return the batch alignment loss.
pub fn batch_loss(g: &mut Graph, store: &ParamStore, table: &Mat, batch: &[&FeaturePair]) -> Result<Var> {
    let table = g.constant(table.clone());
    let mut seqs = Vec::with_capacity(batch.len());
    for p in batch {
        let s = g.constant(p.spatial.clone());
        let m = g.constant(p.motion.clone());
        seqs.push(adapter::forward(g, store, s, m)?);
    }
    let targets: Vec<&[usize]> = batch.iter().map(|p| p.target.as_slice()).collect();
    batch_loss_from_sign(g, store, table, &seqs, &targets)
}

#[derive(Clone, Debug)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
}

/// Train only the adapter and the temperature with the alignment loss.
/// Parameters outside `adapter.*` and the log-temperature are left untouched,
/// and the embedding table is only read.
pub fn warmup_align(
    store: &mut ParamStore,
    pairs: &[FeaturePair],
    table: &Mat,
    cfg: &WarmupConfig,
) -> Result<Vec<AlignRecord>> {
    if cfg.steps == 0 {
        return Err(argument("warm-up needs at least one step"));
    }
    if pairs.is_empty() {
        return Err(argument("warm-up needs at least one training pair"));
    }
    if !store.contains(LOG_TAU) {
        init_temperature(store);
    }
    let saved: Vec<(String, bool)> = store.iter().map(|(n, p)| (n.clone(), p.trainable)).collect();
    for (name, p) in store.iter_mut() {
        p.trainable = name.starts_with(adapter::PREFIX) || name == LOG_TAU;
    }

    let sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut trace = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let idx = sampler.batch(step);
            let batch: Vec<&FeaturePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, store, table, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("alignment loss is {value}"),
                });
            }
            trace.push(AlignRecord {
                step,
                loss: value,
                tau: temperature(store).unwrap_or(f64::NAN),
            });
            let grads = g.backward(loss);
            let mut pg = g.param_grads(&grads);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut pg, c);
            }
            opt.step(store, &pg, cfg.lr);
        }
        Ok(())
    })();
    for (name, t) in saved {
        if let Some(p) = store.get_mut(&name) {
            p.trainable = t;
        }
    }
    result.map(|_| trace)
}
