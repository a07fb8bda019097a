//! Corpus BLEU (13a / zh tokenisation, exponential smoothing) and
//! sentence-averaged ROUGE-L.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

pub const SIGNATURE_13A: &str = "nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp|version:2.2.1";
pub const SIGNATURE_ZH: &str = "nrefs:1|case:mixed|eff:no|tok:zh|smooth:exp|version:2.2.1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    #[default]
    #[serde(rename = "13a")]
    T13a,
    Zh,
}

impl Tokenizer {
    pub fn signature(self) -> &'static str {
        match self {
            Tokenizer::T13a => SIGNATURE_13A,
            Tokenizer::Zh => SIGNATURE_ZH,
        }
    }
}

fn rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            // Punctuation and symbols.
            (r"([\{-~\[-` -&\(-\+:-@/])", " $1 "),
            // Period and comma unless preceded by a digit.
            (r"([^0-9])([\.,])", "$1 $2 "),
            // ...unless followed by a digit.
            (r"([\.,])([^0-9])", " $1 $2"),
            // Dash after a digit.
            (r"([0-9])(-)", "$1 $2 "),
        ]
        .into_iter()
        .map(|(re, rep)| (Regex::new(re).expect("static regex"), rep))
        .collect()
    })
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303f | 0x3040..=0x30ff | 0x3400..=0x4dbf | 0x4e00..=0x9fff
        | 0xf900..=0xfaff | 0xff00..=0xffef | 0x20000..=0x2a6df)
}

/// mteval-v13a tokenisation.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split_whitespace().map(String::from).collect()
}

/// Each CJK character becomes its own token; the rest follows 13a.
pub fn tokenize_zh(line: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(line.len() * 2);
    for c in line.trim().chars() {
        if is_cjk(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    tokenize_13a(&spaced)
}

pub fn tokenize(line: &str, tok: Tokenizer) -> Vec<String> {
    match tok {
        Tokenizer::T13a => tokenize_13a(line),
        Tokenizer::Zh => tokenize_zh(line),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level sufficient statistics up to order `max_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    pub sys_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats(hypotheses: &[&str], references: &[&str], max_n: usize, tok: Tokenizer) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(argument("BLEU needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(argument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(argument("BLEU order must be at least 1"));
    }
    let mut s = BleuStats {
        correct: vec![0; max_n],
        total: vec![0; max_n],
        sys_len: 0,
        ref_len: 0,
    };
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokenize(h, tok);
        let r = tokenize(r, tok);
        s.sys_len += h.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.total[n - 1] += h.len().saturating_sub(n - 1);
            s.correct[n - 1] += hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Score ×100 with exponential smoothing of zero-count orders. Precisions
    /// are kept as fractions so a perfect match is exactly 100.
    pub fn score(&self) -> f64 {
        let max_n = self.total.len();
        let mut precisions = vec![0.0; max_n];
        let mut smooth = 1.0;
        for ((p, &correct), &total) in precisions.iter_mut().zip(&self.correct).zip(&self.total) {
            if total == 0 {
                break;
            }
            *p = if correct == 0 {
                smooth *= 2.0;
                1.0 / (smooth * total as f64)
            } else {
                correct as f64 / total as f64
            };
        }
        let bp = if self.sys_len < self.ref_len {
            if self.sys_len > 0 {
                (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
            } else {
                0.0
            }
        } else {
            1.0
        };
        let log = |p: f64| if p == 0.0 { -9_999_999_999.0 } else { p.ln() };
        let mean_log = precisions.iter().map(|&p| log(p)).sum::<f64>() / max_n as f64;
        100.0 * bp * mean_log.exp()
    }
}

pub fn bleu(hypotheses: &[&str], references: &[&str], max_n: usize, tok: Tokenizer) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references, max_n, tok)?.score())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F1 (β = 1) over whitespace tokens, ×100.
pub fn rouge_l(hypothesis: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if h.is_empty() || r.is_empty() {
        return Err(argument("ROUGE-L needs non-empty hypothesis and reference"));
    }
    let l = lcs_len(&h, &r) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / h.len() as f64;
    let rec = l / r.len() as f64;
    Ok(100.0 * 2.0 * p * rec / (p + rec))
}

/// Mean sentence ROUGE-L; an empty hypothesis scores 0.
pub fn corpus_rouge_l(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(argument("ROUGE-L needs equally many, non-zero hypotheses and references"));
    }
    let mut sum = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        if r.split_whitespace().next().is_none() {
            return Err(argument("empty reference"));
        }
        if h.split_whitespace().next().is_some() {
            sum += rouge_l(h, r)?;
        }
    }
    Ok(sum / hypotheses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Learned metric, not computed.
    pub bleurt: String,
    pub num_hypotheses: usize,
    pub num_references: usize,
    pub signature: String,
}

pub fn metric_report(hypotheses: &[&str], references: &[&str], tok: Tokenizer) -> Result<MetricReport> {
    let b = |n| bleu(hypotheses, references, n, tok);
    Ok(MetricReport {
        bleu1: b(1)?,
        bleu2: b(2)?,
        bleu3: b(3)?,
        bleu4: b(4)?,
        rouge_l: corpus_rouge_l(hypotheses, references)?,
        bleurt: "n/a".into(),
        num_hypotheses: hypotheses.len(),
        num_references: references.len(),
        signature: tok.signature().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_13a_cases() {
        assert_eq!(tokenize_13a("Hello, world."), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize_13a("3.5 and 1,000"), ["3.5", "and", "1,000"]);
        assert_eq!(tokenize_13a("it's 5-6 (ok)"), ["it's", "5", "-", "6", "(", "ok", ")"]);
        assert_eq!(tokenize_13a("a &amp; b"), ["a", "&", "b"]);
        assert_eq!(tokenize_13a("Straße"), ["Straße"]);
    }

    #[test]
    fn tokenizer_zh_splits_characters() {
        assert_eq!(tokenize_zh("我们走。ok"), ["我", "们", "走", "。", "ok"]);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu(&["a b c d"], &["a b c d"], 4, Tokenizer::T13a).unwrap() - 100.0).abs() < 1e-9);
        let b = bleu(&["a b c d"], &["a b c d e"], 4, Tokenizer::T13a).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        assert!(bleu(&[], &[], 4, Tokenizer::T13a).is_err());
        assert!(bleu(&["a"], &["a", "b"], 4, Tokenizer::T13a).is_err());
    }

    #[test]
    fn bleu_smoothing_of_missing_orders() {
        // One matching unigram out of two, no higher matches:
        // p1 = 50, p2 = 100/(2·1), so BLEU-2 = sqrt(50·50).
        let b = bleu(&["a x"], &["a y"], 2, Tokenizer::T13a).unwrap();
        assert!((b - 50.0).abs() < 1e-9);
        // Hypothesis shorter than the order: total is zero for n = 3, 4.
        assert_eq!(bleu(&["a b"], &["a b"], 4, Tokenizer::T13a).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a c", "a b c").unwrap(), 80.0);
        assert_eq!(rouge_l("x y z", "x y z").unwrap(), 100.0);
        assert_eq!(rouge_l("p q", "r s").unwrap(), 0.0);
        assert!(rouge_l("", "a").is_err());
    }

    #[test]
    fn report_has_signature_and_na() {
        let r = metric_report(&["a b c d"], &["a b c d"], Tokenizer::T13a).unwrap();
        assert_eq!(r.bleu4, 100.0);
        assert_eq!(r.rouge_l, 100.0);
        assert_eq!(r.bleurt, "n/a");
        assert_eq!(r.signature, SIGNATURE_13A);
    }

    proptest! {
        #[test]
        fn corpus_scores_are_order_invariant(
            pairs in prop::collection::vec(("[a-e]( [a-e]){0,6}", "[a-e]( [a-e]){0,6}"), 1..8),
            rot in 0usize..8,
        ) {
            let h: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
            let r: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
            let k = rot % h.len();
            let (mut h2, mut r2) = (h.clone(), r.clone());
            h2.rotate_left(k);
            r2.rotate_left(k);
            h2.reverse();
            r2.reverse();
            let a = metric_report(&h, &r, Tokenizer::T13a).unwrap();
            let b = metric_report(&h2, &r2, Tokenizer::T13a).unwrap();
            prop_assert_eq!(a.bleu4, b.bleu4);
            prop_assert_eq!(a.bleu1, b.bleu1);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-9);
            for v in [a.bleu1, a.bleu2, a.bleu3, a.bleu4, a.rouge_l] {
                prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
            }
        }
    }
}
