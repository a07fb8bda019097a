//! Greedy and beam-search decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{argument, Result};
use crate::llm::decoder::DecoderModel;
use crate::llm::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateConfig {
    /// Maximum number of emitted tokens, not counting `</s>`.
    pub max_len: usize,
    pub beam: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { max_len: 32, beam: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub text: String,
    /// Sum of token log-probabilities (including `</s>` when emitted).
    pub score: f64,
    /// True when `max_len` was reached before `</s>`.
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn generate(model: &DecoderModel, sign: Option<&Mat>, prompt: &[usize], cfg: GenerateConfig) -> Result<Generation> {
    if cfg.max_len == 0 {
        return Err(argument("max_len must be at least 1"));
    }
    if cfg.beam == 0 {
        return Err(argument("beam width must be at least 1"));
    }
    let memory = model.memory(sign, prompt)?;
    let (tokens, score, truncated) = if cfg.beam == 1 {
        greedy(model, &memory, cfg.max_len)?
    } else {
        beam_search(model, &memory, cfg.max_len, cfg.beam)?
    };
    Ok(Generation {
        text: model.vocab().decode(&tokens),
        tokens,
        score,
        truncated,
    })
}

fn greedy(model: &DecoderModel, memory: &Mat, max_len: usize) -> Result<(Vec<usize>, f64, bool)> {
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = model.next_log_probs(memory, &prefix)?;
        let lp = lp.as_slice().expect("contiguous");
        let next = argmax(lp);
        score += lp[next];
        if next == EOS {
            return Ok((prefix[1..].to_vec(), score, false));
        }
        prefix.push(next);
    }
    Ok((prefix[1..].to_vec(), score, true))
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    finished: bool,
}

/// Standard beam search on summed log-probabilities. Candidate ordering is
/// by score, then by token sequence, so equal scores resolve to lower ids
/// exactly as [`greedy`] does.
fn beam_search(model: &DecoderModel, memory: &Mat, max_len: usize, beam: usize) -> Result<(Vec<usize>, f64, bool)> {
    let mut beams = vec![Hyp {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut cands: Vec<Hyp> = Vec::new();
        for h in &beams {
            if h.finished {
                cands.push(h.clone());
                continue;
            }
            let lp = model.next_log_probs(memory, &h.tokens)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(beam) {
                let mut tokens = h.tokens.clone();
                let finished = t == EOS;
                if !finished {
                    tokens.push(t);
                }
                cands.push(Hyp {
                    tokens,
                    score: h.score + lp[t],
                    finished,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        cands.truncate(beam);
        beams = cands;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.score.total_cmp(&b.score).then_with(|| b.tokens.cmp(&a.tokens)))
        .expect("at least one beam");
    Ok((best.tokens[1..].to_vec(), best.score, !best.finished))
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub fn beam(model: &DecoderModel, memory: &Mat, max_len: usize, width: usize) -> (Vec<usize>, f64, bool) {
        beam_search(model, memory, max_len, width).unwrap()
    }
}
