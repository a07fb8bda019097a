//! Whitespace vocabulary with a handful of reserved ids.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by the distinct whitespace tokens of `texts`,
    /// sorted so the id assignment does not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(w)))
            .map(String::from)
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Unknown words map to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Unknown words are an error.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| argument(format!("token `{w}` is not in the vocabulary"))))
            .collect()
    }

    /// Join non-special tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_order_independent() {
        let a = Vocab::build(["b a", "c"]);
        let b = Vocab::build(["c a", "b"]);
        assert_eq!(a, b);
        assert_eq!(a.id("a"), Some(4));
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::build(["rain in the north"]);
        let ids = v.encode_strict("rain north").unwrap();
        assert_eq!(v.decode(&ids), "rain north");
        assert_eq!(v.encode_lossy("snow"), vec![UNK]);
        assert!(v.encode_strict("snow").is_err());
    }

    #[test]
    fn serde_as_token_list() {
        let v = Vocab::build(["x y"]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["<pad>","<s>","</s>","<unk>","x","y"]"#);
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
