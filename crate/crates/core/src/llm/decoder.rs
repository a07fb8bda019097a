//! A small pre-norm encoder-decoder transformer standing in for the frozen
//! language model.
//!
//! The encoder reads the sign feature rows followed by the prompt token
//! embeddings. The decoder is teacher-forced from `<s>` and its output
//! projection is tied to the embedding table.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{log_softmax_rows, Graph, Mat, Var};
use crate::error::{argument, Result};
use crate::llm::lora::{self, LoraSpec};
use crate::llm::vocab::{Vocab, BOS, EOS};
use crate::params::{normal, uniform_fan_in, ParamStore};

pub const PREFIX: &str = "lm.";
const MASKED: f64 = -1e9;

/// The decoder's token embeddings `E_llm` (`V × d′`) and their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub weights: Mat,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocab, weights: Mat) -> Result<Self> {
        if vocab.is_empty() {
            return Err(argument("embedding table needs at least one token"));
        }
        if vocab.len() != weights.nrows() {
            return Err(argument(format!(
                "vocabulary has {} tokens but the table has {} rows",
                vocab.len(),
                weights.nrows()
            )));
        }
        Ok(Self { vocab, weights })
    }

    pub fn random(vocab: Vocab, dim: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = normal(&mut rng, vocab.len(), dim, std);
        Self::new(vocab, weights)
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    /// SHA-256 of the table's exact bits and token strings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for v in self.weights.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub embed_std: f64,
    /// Multiplier on the tied output projection.
    pub logit_scale: f64,
}

impl DecoderConfig {
    pub fn toy(d_model: usize) -> Self {
        Self {
            d_model,
            ffn_dim: 2 * d_model,
            enc_layers: 1,
            dec_layers: 1,
            embed_std: 1.0,
            logit_scale: 1.0 / (d_model as f64).powf(0.25),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub table: EmbeddingTable,
    /// Base weights (`lm.*`, frozen) and LoRA factors (`lora.*`).
    pub params: ParamStore,
    pub lora: Option<LoraSpec>,
}

fn attn_names(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "o"].map(|p| format!("{prefix}.{p}"))
}

impl DecoderModel {
    /// Random frozen base model over `table`.
    pub fn new(config: DecoderConfig, table: EmbeddingTable, seed: u64) -> Result<Self> {
        if table.dim() != config.d_model {
            return Err(argument(format!(
                "embedding width {} differs from d_model {}",
                table.dim(),
                config.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_dim;
        let mut params = ParamStore::new();
        let mut add = |params: &mut ParamStore, name: String, r: usize, c: usize, fan_in: usize| {
            params.insert(name, uniform_fan_in(&mut rng, r, c, fan_in), false);
        };
        let blocks = Self::block_prefixes(&config);
        for (prefix, attns) in blocks {
            for a in attns {
                for n in attn_names(&format!("{prefix}.{a}")) {
                    add(&mut params, n, d, d, d);
                }
            }
            add(&mut params, format!("{prefix}.ffn.w1"), d, f, d);
            add(&mut params, format!("{prefix}.ffn.b1"), 1, f, d);
            add(&mut params, format!("{prefix}.ffn.w2"), f, d, f);
            add(&mut params, format!("{prefix}.ffn.b2"), 1, d, f);
        }
        Ok(Self {
            config,
            table,
            params,
            lora: None,
        })
    }

    fn block_prefixes(config: &DecoderConfig) -> Vec<(String, Vec<&'static str>)> {
        let mut out = Vec::new();
        for l in 0..config.enc_layers {
            out.push((format!("{PREFIX}enc.{l}"), vec!["attn"]));
        }
        for l in 0..config.dec_layers {
            out.push((format!("{PREFIX}dec.{l}"), vec!["self", "cross"]));
        }
        out
    }

    /// Names of every attention projection (`q`, `k`, `v`, `o`).
    pub fn attention_weight_names(&self) -> Vec<String> {
        Self::block_prefixes(&self.config)
            .into_iter()
            .flat_map(|(p, attns)| {
                attns
                    .into_iter()
                    .flat_map(move |a| attn_names(&format!("{p}.{a}")))
            })
            .collect()
    }

    /// Attention projections plus the feed-forward matrices.
    pub fn all_weight_names(&self) -> Vec<String> {
        let mut names = self.attention_weight_names();
        for (p, _) in Self::block_prefixes(&self.config) {
            names.push(format!("{p}.ffn.w1"));
            names.push(format!("{p}.ffn.w2"));
        }
        names
    }

    pub fn vocab(&self) -> &Vocab {
        &self.table.vocab
    }

    fn lin(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        lora::linear(g, &self.params, self.lora.as_ref(), name, x)
    }

    fn attention(&self, g: &mut Graph, prefix: &str, q_in: Var, kv_in: Var, causal: bool) -> Var {
        let q = self.lin(g, &format!("{prefix}.q"), q_in);
        let k = self.lin(g, &format!("{prefix}.k"), kv_in);
        let v = self.lin(g, &format!("{prefix}.v"), kv_in);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let mut scores = g.scale(scores, 1.0 / (self.config.d_model as f64).sqrt());
        if causal {
            let (r, c) = g.value(scores).dim();
            let mask = Mat::from_shape_fn((r, c), |(i, j)| if j > i { MASKED } else { 0.0 });
            let mask = g.constant(mask);
            scores = g.add(scores, mask);
        }
        let p = g.softmax_rows(scores);
        let ctx = g.matmul(p, v);
        self.lin(g, &format!("{prefix}.o"), ctx)
    }

    fn ffn(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let b1 = g.param(&self.params, &format!("{prefix}.ffn.b1"));
        let b2 = g.param(&self.params, &format!("{prefix}.ffn.b2"));
        let h = self.lin(g, &format!("{prefix}.ffn.w1"), x);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let y = self.lin(g, &format!("{prefix}.ffn.w2"), h);
        g.add_row(y, b2)
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Var {
        let (len, d) = g.value(x).dim();
        let pe = g.constant(positional_encoding(len, d));
        g.add(x, pe)
    }

    /// Encoder memory for `[sign rows; prompt embeddings]`.
    pub fn encode(&self, g: &mut Graph, sign: Option<Var>, prompt: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let mut parts = Vec::new();
        if let Some(s) = sign {
            if g.value(s).ncols() != d {
                return Err(argument(format!(
                    "sign feature width {} differs from decoder width {d}",
                    g.value(s).ncols()
                )));
            }
            parts.push(s);
        }
        if !prompt.is_empty() {
            self.check_ids(prompt)?;
            let table = g.constant(self.table.weights.clone());
            parts.push(g.gather_rows(table, prompt));
        }
        if parts.is_empty() {
            return Err(argument("encoder input is empty"));
        }
        let x = g.concat_rows(&parts);
        let mut x = self.add_positions(g, x);
        for l in 0..self.config.enc_layers {
            let p = format!("{PREFIX}enc.{l}");
            let n = g.layer_norm_rows(x);
            let a = self.attention(g, &format!("{p}.attn"), n, n, false);
            x = g.add(x, a);
            let n = g.layer_norm_rows(x);
            let f = self.ffn(g, &p, n);
            x = g.add(x, f);
        }
        Ok(g.layer_norm_rows(x))
    }

    /// Next-token logits for every position of `prefix` (`len × V`).
    pub fn decode(&self, g: &mut Graph, memory: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(argument("decoder prefix is empty"));
        }
        self.check_ids(prefix)?;
        let table = g.constant(self.table.weights.clone());
        let y = g.gather_rows(table, prefix);
        let mut y = self.add_positions(g, y);
        for l in 0..self.config.dec_layers {
            let p = format!("{PREFIX}dec.{l}");
            let n = g.layer_norm_rows(y);
            let a = self.attention(g, &format!("{p}.self"), n, n, true);
            y = g.add(y, a);
            let n = g.layer_norm_rows(y);
            let c = self.attention(g, &format!("{p}.cross"), n, memory, false);
            y = g.add(y, c);
            let n = g.layer_norm_rows(y);
            let f = self.ffn(g, &p, n);
            y = g.add(y, f);
        }
        let h = g.layer_norm_rows(y);
        let et = g.transpose(table);
        let logits = g.matmul(h, et);
        Ok(g.scale(logits, self.config.logit_scale))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.table.len()) {
            return Err(argument(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.table.len()
            )));
        }
        Ok(())
    }

    /// Mean teacher-forced cross-entropy of `target` (followed by `</s>`).
    pub fn translation_loss(&self, g: &mut Graph, sign: Option<Var>, prompt: &[usize], target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(argument("target must contain at least one token"));
        }
        self.check_ids(target)?;
        let memory = self.encode(g, sign, prompt)?;
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS);
        input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS);
        let logits = self.decode(g, memory, &input)?;
        let logp = g.log_softmax_rows(logits);
        Ok(g.nll_mean(logp, &labels))
    }

    /// Plain-value next-token log-probabilities after `prefix`.
    pub fn next_log_probs(&self, memory: &Mat, prefix: &[usize]) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let logits = self.decode(&mut g, m, prefix)?;
        let lp = log_softmax_rows(g.value(logits));
        Ok(lp.row(lp.nrows() - 1).to_owned())
    }

    /// Plain-value encoder memory.
    pub fn memory(&self, sign: Option<&Mat>, prompt: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let s = sign.map(|s| g.constant(s.clone()));
        let m = self.encode(&mut g, s, prompt)?;
        Ok(g.value(m).clone())
    }
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Mean cross-entropy of `labels` under raw `logits` (one row per label).
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let lp = log_softmax_rows(logits);
    -labels.iter().enumerate().map(|(i, &t)| lp[[i, t]]).sum::<f64>() / labels.len() as f64
}
