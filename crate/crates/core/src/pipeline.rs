//! End-to-end wiring: frozen encoders, the trainable sign adapter and the
//! decoder, plus per-sample prompt assembly.

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig};
use crate::align::{self, FeaturePair};
use crate::autograd::Mat;
use crate::data::{Corpus, SignSample};
use crate::error::{argument, Result};
use crate::llm::{
    apply_lora, build_prompt, generate, select_exemplars, DecoderConfig, DecoderModel, EmbeddingTable,
    GenerateConfig, Generation, PromptMode, PromptSpec, Vocab, DEFAULT_INSTRUCTION,
};
use crate::motion::{self, ToyClipEncoder};
use crate::params::ParamStore;
use crate::spatial::{self, ToyFrameEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTargets {
    /// Every attention projection.
    Attention,
    /// Attention projections and feed-forward matrices.
    All,
    Names(Vec<String>),
}

/// Architecture of every stage. Defaults are desk-scale toy sizes with LoRA
/// on the attention projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub spatial_input: usize,
    pub spatial_patch: usize,
    pub spatial_dim: usize,
    pub scales: Vec<usize>,
    pub clip_len: usize,
    pub clip_stride: usize,
    pub motion_grid: usize,
    pub motion_dim: usize,
    pub adapter_hidden: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: LoraTargets,
    pub instruction: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            spatial_input: 8,
            spatial_patch: 4,
            spatial_dim: 32,
            scales: vec![8, 16],
            clip_len: 16,
            clip_stride: 8,
            motion_grid: 4,
            motion_dim: 32,
            adapter_hidden: 64,
            d_model: 64,
            ffn_dim: 128,
            enc_layers: 1,
            dec_layers: 1,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: LoraTargets::Attention,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default sizes with LoRA on every decoder weight, which lets the tiny
    /// decoder memorise the synthetic corpus within the toy training budget.
    pub fn toy() -> Self {
        Self {
            lora_targets: LoraTargets::All,
            ..Self::default()
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            spatial_dim: self.spatial_dim * self.scales.len(),
            motion_dim: self.motion_dim,
            hidden: self.adapter_hidden,
            out_dim: self.d_model,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            ffn_dim: self.ffn_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ..DecoderConfig::toy(self.d_model)
        }
    }

    pub fn frame_encoder(&self) -> Result<ToyFrameEncoder> {
        ToyFrameEncoder::new(
            self.spatial_input,
            self.spatial_patch,
            self.channels,
            self.spatial_dim,
            self.seed.wrapping_add(101),
        )
    }

    pub fn clip_encoder(&self) -> Result<ToyClipEncoder> {
        ToyClipEncoder::new(
            self.clip_len,
            self.motion_grid,
            self.channels,
            self.motion_dim,
            self.seed.wrapping_add(202),
        )
    }
}

/// Vocabulary over targets, exemplar sources and the instruction.
pub fn build_vocab(corpus: &Corpus, instruction: &str) -> Vocab {
    let mut texts: Vec<&str> = vec![instruction, crate::llm::prompt::SEPARATOR];
    for s in corpus.samples() {
        texts.push(&s.translation);
        texts.extend(s.sources.iter().map(|t| t.text.as_str()));
    }
    Vocab::build(texts)
}

pub struct Pipeline {
    pub config: ModelConfig,
    pub frame_encoder: ToyFrameEncoder,
    pub clip_encoder: ToyClipEncoder,
    /// `adapter.*` and `align.log_tau`.
    pub adapter: ParamStore,
    pub model: DecoderModel,
}

impl Pipeline {
    /// Fresh pipeline: random frozen encoders and decoder, a new adapter, and
    /// zero-initialised LoRA factors on the configured targets.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let frame_encoder = config.frame_encoder()?;
        let clip_encoder = config.clip_encoder()?;
        let mut adapter = config.adapter_config().init(config.seed.wrapping_add(303))?;
        align::init_temperature(&mut adapter);
        let table = EmbeddingTable::random(vocab, config.d_model, 1.0, config.seed.wrapping_add(404))?;
        let base = DecoderModel::new(config.decoder_config(), table, config.seed.wrapping_add(505))?;
        let targets = match &config.lora_targets {
            LoraTargets::Attention => base.attention_weight_names(),
            LoraTargets::All => base.all_weight_names(),
            LoraTargets::Names(n) => n.clone(),
        };
        let model = apply_lora(base, config.lora_rank, config.lora_alpha, &targets, config.seed.wrapping_add(606))?;
        Ok(Self {
            config,
            frame_encoder,
            clip_encoder,
            adapter,
            model,
        })
    }

    /// `(Z_s, Z_m)` from the frozen encoders.
    pub fn extract_features(&self, sample: &SignSample) -> Result<(Mat, Mat)> {
        let video = sample.load_video()?;
        let zs = spatial::encode_video_spatial(&video, &self.frame_encoder, &self.config.scales)?;
        let zm = motion::encode_video_motion(&video, &self.clip_encoder, self.config.clip_stride)?;
        Ok((zs.matrix, zm.matrix))
    }

    /// Precompute features and target ids for every sample. Targets must be
    /// in-vocabulary.
    pub fn prepare(&self, corpus: &Corpus) -> Result<Vec<Example>> {
        corpus
            .samples()
            .iter()
            .map(|s| {
                let (spatial, motion) = self.extract_features(s)?;
                let target = self.model.vocab().encode_strict(&s.translation)?;
                Ok(Example {
                    id: s.id.clone(),
                    translation: s.translation.clone(),
                    pair: FeaturePair { spatial, motion, target },
                })
            })
            .collect()
    }

    pub fn sign_feature(&self, ex: &Example) -> Result<Mat> {
        Ok(adapter::apply(&self.adapter, &ex.pair.spatial, &ex.pair.motion)?.0)
    }

    /// Prompt tokens for `target`, with exemplars drawn from `pool`.
    pub fn prompt_for(&self, pool: &[SignSample], target: &str, mode: PromptMode, seed: u64) -> Result<Vec<usize>> {
        let exemplars = select_exemplars(pool, target, seed);
        let mut spec = PromptSpec::new(self.config.instruction.clone(), exemplars);
        if mode == PromptMode::Train {
            spec = spec.for_training(target);
        }
        build_prompt(&spec, self.model.vocab(), seed)
    }

    /// Decode one prepared example. Exemplars come from the training pool.
    pub fn translate(&self, ex: &Example, pool: &[SignSample], cfg: GenerateConfig, seed: u64) -> Result<Generation> {
        if pool.is_empty() {
            return Err(argument("translation needs a training pool for exemplars"));
        }
        let sign = self.sign_feature(ex)?;
        let prompt = self.prompt_for(pool, &ex.translation, PromptMode::Eval, eval_prompt_seed(seed, &ex.id))?;
        generate(&self.model, Some(&sign), &prompt, cfg)
    }
}

/// A sample with frozen-encoder features and tokenised target.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub translation: String,
    pub pair: FeaturePair,
}

pub fn eval_prompt_seed(seed: u64, id: &str) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
