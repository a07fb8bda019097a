//! Decoder-side plumbing: vocabulary, prompts, the toy language model, LoRA
//! and decoding.

pub mod decoder;
pub mod generate;
pub mod lora;
pub mod prompt;
pub mod vocab;

pub use decoder::{cross_entropy, DecoderConfig, DecoderModel, EmbeddingTable};
pub use generate::{generate, GenerateConfig, Generation};
pub use lora::{apply_lora, LoraSpec};
pub use prompt::{build_prompt, render_prompt, select_exemplars, Exemplar, PromptMode, PromptSpec, DEFAULT_INSTRUCTION};
pub use vocab::Vocab;
