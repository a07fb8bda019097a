//! Evaluation and interpretation: translation metrics, KDE entropy of
//! embedding clouds, visual-token readout and token–gloss similarity.

pub mod kde;
pub mod metrics;
pub mod tokens;

pub use kde::{kde_at_points, kde_entropy, pca, scott_bandwidth, KdeConfig};
pub use metrics::{bleu, corpus_rouge_l, metric_report, rouge_l, MetricReport, Tokenizer};
pub use tokens::{
    token_gloss_similarity, token_gloss_similarity_bow, visual_tokens, BagOfWords, SentenceEmbedder,
    SimilarityScores, VisualTokenResult,
};
