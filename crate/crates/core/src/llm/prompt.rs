//! Instruction prompts with in-context translation exemplars.
//!
//! A prompt is the instruction on its own line followed by one
//! `SOURCE = TARGET` line per exemplar, exemplars shuffled by seed.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SignSample;
use crate::error::{Error, Result};
use crate::llm::vocab::Vocab;

pub const DEFAULT_INSTRUCTION: &str = "Translate the given sentence into German.";
pub const SEPARATOR: &str = "=";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub source: String,
    pub target: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
    /// Target of the sample being prompted; exemplars must not repeat it
    /// during training.
    pub current_target: Option<String>,
    pub mode: PromptMode,
}

impl PromptSpec {
    pub fn new(instruction: impl Into<String>, exemplars: Vec<Exemplar>) -> Self {
        Self {
            instruction: instruction.into(),
            exemplars,
            current_target: None,
            mode: PromptMode::Eval,
        }
    }

    pub fn for_training(mut self, current_target: impl Into<String>) -> Self {
        self.current_target = Some(current_target.into());
        self.mode = PromptMode::Train;
        self
    }
}

/// Render the prompt text. Exemplar order is a seeded shuffle.
pub fn render_prompt(spec: &PromptSpec, seed: u64) -> Result<String> {
    if spec.mode == PromptMode::Train {
        if let Some(cur) = &spec.current_target {
            if let Some(ex) = spec.exemplars.iter().find(|e| e.target.trim() == cur.trim()) {
                return Err(Error::Contract(format!(
                    "exemplar target `{}` equals the training target",
                    ex.target
                )));
            }
        }
    }
    let mut exemplars: Vec<&Exemplar> = spec.exemplars.iter().collect();
    exemplars.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = spec.instruction.clone();
    for ex in exemplars {
        out.push('\n');
        out.push_str(&format!("{} {SEPARATOR} {}", ex.source.trim(), ex.target.trim()));
    }
    Ok(out)
}

/// Render and tokenize. Words outside the vocabulary become `<unk>`.
pub fn build_prompt(spec: &PromptSpec, vocab: &Vocab, seed: u64) -> Result<Vec<usize>> {
    Ok(vocab.encode_lossy(&render_prompt(spec, seed)?))
}

/// Exemplars for `target` taken from `pool`: one sample whose translation
/// differs from `target`, rendered once per precomputed source language.
/// Returns an empty list when no such sample exists.
pub fn select_exemplars(pool: &[SignSample], target: &str, seed: u64) -> Vec<Exemplar> {
    let candidates: Vec<&SignSample> = pool
        .iter()
        .filter(|s| s.translation.trim() != target.trim() && !s.sources.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(pick) = candidates.choose(&mut rng) else {
        return Vec::new();
    };
    pick.sources
        .iter()
        .map(|src| Exemplar {
            source: src.text.clone(),
            target: pick.translation.clone(),
        })
        .collect()
}
