//! Nearest-word readout of sign features and bag-of-words similarity between
//! visual tokens, glosses and translations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{argument, Error, Result};
use crate::llm::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualToken {
    pub id: usize,
    pub word: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTokenResult {
    pub tokens: Vec<VisualToken>,
    /// Words with consecutive repeats collapsed.
    pub deduplicated: Vec<String>,
}

/// Euclidean nearest table row for every feature row; ties go to the lowest id.
pub fn visual_tokens(z: &Mat, table: &EmbeddingTable) -> Result<VisualTokenResult> {
    if table.is_empty() {
        return Err(argument("embedding table is empty"));
    }
    if z.ncols() != table.dim() {
        return Err(argument(format!(
            "feature width {} differs from embedding width {}",
            z.ncols(),
            table.dim()
        )));
    }
    let mut tokens = Vec::with_capacity(z.nrows());
    for row in z.rows() {
        let mut best = (0, f64::INFINITY);
        for (id, e) in table.weights.rows().into_iter().enumerate() {
            let d2: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (id, d2);
            }
        }
        let word = table.vocab.token(best.0).unwrap_or("<unk>").to_string();
        tokens.push(VisualToken {
            id: best.0,
            word,
            distance: best.1.sqrt(),
        });
    }
    let words: Vec<String> = tokens.iter().map(|t| t.word.clone()).collect();
    Ok(VisualTokenResult {
        deduplicated: dedup_consecutive(&words),
        tokens,
    })
}

pub fn dedup_consecutive(words: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for w in words {
        if out.last() != Some(w) {
            out.push(w.clone());
        }
    }
    out
}

/// Maps a word sequence to a fixed-length vector.
pub trait SentenceEmbedder {
    fn embed(&self, words: &[&str]) -> Vec<f64>;
}

/// Case-insensitive presence indicators over a fixed word list, L2-normalised.
pub struct BagOfWords {
    index: BTreeMap<String, usize>,
}

impl BagOfWords {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut index = BTreeMap::new();
        for w in words {
            let n = index.len();
            index.entry(w.to_lowercase()).or_insert(n);
        }
        Self { index }
    }
}

impl SentenceEmbedder for BagOfWords {
    fn embed(&self, words: &[&str]) -> Vec<f64> {
        let mut v = vec![0.0; self.index.len()];
        for w in words {
            if let Some(&i) = self.index.get(&w.to_lowercase()) {
                v[i] = 1.0;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if a.len() != b.len() {
        return Err(argument("cosine of vectors with different lengths"));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub gloss_translation: f64,
    pub visual_translation: f64,
    pub visual_gloss: f64,
}

pub fn token_gloss_similarity(
    visual: &[&str],
    gloss: &[&str],
    translation: &[&str],
    embedder: &dyn SentenceEmbedder,
) -> Result<SimilarityScores> {
    if visual.is_empty() || gloss.is_empty() || translation.is_empty() {
        return Err(argument("similarity needs non-empty word sequences"));
    }
    let (v, g, t) = (embedder.embed(visual), embedder.embed(gloss), embedder.embed(translation));
    Ok(SimilarityScores {
        gloss_translation: cosine(&g, &t)?,
        visual_translation: cosine(&v, &t)?,
        visual_gloss: cosine(&v, &g)?,
    })
}

/// Similarity with a bag-of-words embedder over the union of the three
/// sequences.
pub fn token_gloss_similarity_bow(visual: &[&str], gloss: &[&str], translation: &[&str]) -> Result<SimilarityScores> {
    let bow = BagOfWords::new(visual.iter().chain(gloss).chain(translation).copied());
    token_gloss_similarity(visual, gloss, translation, &bow)
}
