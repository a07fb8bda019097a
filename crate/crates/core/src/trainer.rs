//! Two-phase optimisation: an alignment-only warm-up of the sign adapter and
//! temperature, then joint training of adapter, temperature and LoRA factors
//! on `L_ce + L_vt`.
//!
//! Both phases are driven by a step clock. The learning-rate schedule starts
//! at the first joint step; the warm-up uses a constant rate.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter;
use crate::align::{self, LOG_TAU};
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::SignSample;
use crate::error::{argument, Error, Result};
use crate::llm::{decoder, lora, PromptMode};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::pipeline::{Example, Pipeline};

/// Deterministic mini-batches: each epoch is a fresh seeded permutation, so
/// the batch for any step can be recomputed without replaying earlier ones.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(argument("cannot sample batches from an empty set"));
        }
        if batch == 0 {
            return Err(argument("batch size must be at least 1"));
        }
        Ok(Self {
            n,
            batch: batch.min(n),
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn batch(&self, step: usize) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, slot) = (step / bpe, step % bpe);
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch as u64)));
        let lo = slot * self.batch;
        perm[lo..(lo + self.batch).min(self.n)].to_vec()
    }
}

/// SplitMix-style combination of two words.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Alignment-only steps before joint training.
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub lr_warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Constant learning rate of the warm-up phase.
    pub align_lr: f64,
    pub clip_norm: f64,
    /// Save a checkpoint every this many steps of either phase (0: only at
    /// phase ends).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            epochs: 40,
            batch_size: 8,
            peak_lr: 1e-4,
            min_lr: 5e-5,
            lr_warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            seed: 0,
            align_lr: 1e-4,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that overfit the 32-sample synthetic corpus in well under a
    /// minute of CPU time.
    pub fn toy() -> Self {
        Self {
            warmup_steps: 300,
            epochs: 1000,
            peak_lr: 3e-3,
            min_lr: 3e-4,
            lr_warmup_steps: 20,
            align_lr: 1e-3,
            seed: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_rate = |x: f64| x.is_finite() && x > 0.0;
        if !ok_rate(self.min_lr) || !ok_rate(self.peak_lr) || self.min_lr > self.peak_lr {
            return Err(argument(format!(
                "need 0 < min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if !ok_rate(self.align_lr) {
            return Err(argument("align_lr must be positive"));
        }
        if !ok_rate(self.clip_norm) {
            return Err(argument("clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(argument("batch_size must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(argument(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(argument("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// `epochs × ⌈train_size / batch_size⌉`.
    pub fn total_steps(&self, train_size: usize) -> usize {
        self.epochs * train_size.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, train_size: usize) -> Schedule {
        Schedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup: self.lr_warmup_steps,
            total: self.total_steps(train_size),
        }
    }
}

/// Linear ramp to `peak` over `warmup` steps, then cosine decay to `min` at
/// `total`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn ramp(&self, t: f64) -> f64 {
        self.peak * (t / self.warmup as f64)
    }

    /// Written as `peak − …` so the junction value is exactly `peak`.
    pub fn cosine(&self, t: f64) -> f64 {
        let span = (self.total - self.warmup) as f64;
        let progress = ((t - self.warmup as f64) / span).clamp(0.0, 1.0);
        let drop = 0.5 * (self.peak - self.min) * (1.0 - (std::f64::consts::PI * progress).cos());
        (self.peak - drop).max(self.min)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.ramp(step as f64)
        } else if step >= self.total {
            self.min
        } else {
            self.cosine(step as f64)
        }
    }
}

pub fn lr_at(step: usize, config: &TrainConfig, train_size: usize) -> f64 {
    config.schedule(train_size).lr_at(step)
}

pub fn combined_loss(l_ce: f64, l_vt: f64) -> Result<f64> {
    if !l_ce.is_finite() || !l_vt.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss component: L_ce={l_ce}, L_vt={l_vt}")));
    }
    Ok(l_ce + l_vt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

/// One optimiser step of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    pub step: usize,
    pub lr: f64,
    pub l_vt: f64,
    pub l_ce: Option<f64>,
    pub total: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints (and an abort dump) go; none are written without it.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

/// Invariant evidence gathered along the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub table_hash_start: String,
    pub table_hash_end: String,
    pub base_hash_start: String,
    pub base_hash_end: String,
    /// LoRA factors before and after the warm-up.
    pub lora_hash_warmup_start: String,
    pub lora_hash_warmup_end: String,
    /// Whether the adapted decoder reproduced the base decoder exactly at the
    /// first joint step (`None` when the joint phase did not run from step 0).
    pub lora_identity_at_joint_start: Option<bool>,
    pub total_joint_steps: usize,
}

impl TrainReport {
    pub fn invariants_hold(&self) -> bool {
        self.table_hash_start == self.table_hash_end
            && self.base_hash_start == self.base_hash_end
            && self.lora_hash_warmup_start == self.lora_hash_warmup_end
            && self.lora_identity_at_joint_start != Some(false)
    }
}

fn set_phase_trainable(pipe: &mut Pipeline, phase: Phase) {
    for (_, p) in pipe.adapter.iter_mut() {
        p.trainable = true;
    }
    for (name, p) in pipe.model.params.iter_mut() {
        p.trainable = phase == Phase::Joint && name.starts_with(lora::PREFIX);
    }
}

/// Compare the adapted decoder against the same weights with LoRA stripped.
fn lora_is_identity(pipe: &Pipeline, ex: &Example, prompt: &[usize]) -> Result<bool> {
    let mut base = pipe.model.clone();
    base.lora = None;
    let sign = pipe.sign_feature(ex)?;
    let ma = pipe.model.memory(Some(&sign), prompt)?;
    let mb = base.memory(Some(&sign), prompt)?;
    if ma != mb {
        return Ok(false);
    }
    let mut prefix = vec![crate::llm::vocab::BOS];
    prefix.extend_from_slice(&ex.pair.target);
    Ok(pipe.model.next_log_probs(&ma, &prefix)? == base.next_log_probs(&mb, &prefix)?)
}

fn train_prompt_seed(seed: u64, step: usize, idx: usize) -> u64 {
    mix(mix(seed, step as u64), idx as u64)
}

struct Run<'a> {
    pipe: &'a mut Pipeline,
    examples: &'a [Example],
    pool: &'a [SignSample],
    cfg: &'a TrainConfig,
    opt: AdamW,
    dir: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
}

impl Run<'_> {
    fn save(&mut self, phase: Phase, step: usize) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}-{step:07}", phase.as_str()));
            Checkpoint::capture(self.pipe, self.cfg, &self.opt, phase, step).save(&path)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }

    fn abort(&mut self, phase: Phase, step: usize, message: String) -> Error {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("abort-{}-{step:07}", phase.as_str()));
            match Checkpoint::capture(self.pipe, self.cfg, &self.opt, phase, step).save(&path) {
                Ok(()) => log::error!("state dumped to {}", path.display()),
                Err(e) => log::error!("state dump failed: {e}"),
            }
        }
        Error::Training { step, message }
    }

    fn update(&mut self, g: &Graph, loss: Var, lr: f64) -> f64 {
        let grads = g.backward(loss);
        let mut pg = g.param_grads(&grads);
        let norm = clip_global_norm(&mut pg, self.cfg.clip_norm);
        self.opt.step(&mut self.pipe.adapter, &pg, lr);
        self.opt.step(&mut self.pipe.model.params, &pg, lr);
        norm
    }

    /// Numeric failures inside a step abort the run like a non-finite loss.
    fn guard(&mut self, phase: Phase, step: usize, r: Result<TraceRecord>) -> Result<TraceRecord> {
        match r {
            Err(e @ (Error::Numeric(_) | Error::Degenerate(_))) => Err(self.abort(phase, step, e.to_string())),
            other => other,
        }
    }

    fn check(&mut self, phase: Phase, step: usize, rec: &TraceRecord) -> Result<()> {
        if !rec.total.is_finite() || !rec.grad_norm.is_finite() {
            let msg = format!("non-finite loss {} (gradient norm {})", rec.total, rec.grad_norm);
            return Err(self.abort(phase, step, msg));
        }
        if !self.pipe.adapter.all_finite() || !self.pipe.model.params.all_finite() {
            return Err(self.abort(phase, step, "parameters became non-finite".into()));
        }
        Ok(())
    }

    fn warmup_step(&mut self, sampler: &BatchSampler, step: usize) -> Result<TraceRecord> {
        let idx = sampler.batch(step);
        let batch: Vec<_> = idx.iter().map(|&i| &self.examples[i].pair).collect();
        let mut g = Graph::new();
        let loss = align::batch_loss(&mut g, &self.pipe.adapter, &self.pipe.model.table.weights, &batch)?;
        let value = g.scalar(loss);
        let tau = align::temperature(&self.pipe.adapter).unwrap_or(f64::NAN);
        let lr = self.cfg.align_lr;
        let grad_norm = if value.is_finite() { self.update(&g, loss, lr) } else { f64::NAN };
        Ok(TraceRecord {
            phase: Phase::Warmup,
            step,
            lr,
            l_vt: value,
            l_ce: None,
            total: value,
            tau,
            grad_norm,
        })
    }

    fn joint_step(&mut self, sampler: &BatchSampler, step: usize, lr: f64) -> Result<TraceRecord> {
        let idx = sampler.batch(step);
        let mut g = Graph::new();
        let mut seqs = Vec::with_capacity(idx.len());
        let mut ce_terms = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ex = &self.examples[i];
            let s = g.constant(ex.pair.spatial.clone());
            let m = g.constant(ex.pair.motion.clone());
            let z = adapter::forward(&mut g, &self.pipe.adapter, s, m)?;
            let seed = train_prompt_seed(self.cfg.seed, step, i);
            let prompt = self.pipe.prompt_for(self.pool, &ex.translation, PromptMode::Train, seed)?;
            ce_terms.push(self.pipe.model.translation_loss(&mut g, Some(z), &prompt, &ex.pair.target)?);
            seqs.push(z);
        }
        let mut ce = ce_terms[0];
        for &t in &ce_terms[1..] {
            ce = g.add(ce, t);
        }
        let ce = g.scale(ce, 1.0 / idx.len() as f64);
        let table = g.constant(self.pipe.model.table.weights.clone());
        let targets: Vec<&[usize]> = idx.iter().map(|&i| self.examples[i].pair.target.as_slice()).collect();
        let vt = align::batch_loss_from_sign(&mut g, &self.pipe.adapter, table, &seqs, &targets)?;
        let total = g.add(ce, vt);
        let (l_ce, l_vt) = (g.scalar(ce), g.scalar(vt));
        let tau = align::temperature(&self.pipe.adapter).unwrap_or(f64::NAN);
        let (value, grad_norm) = match combined_loss(l_ce, l_vt) {
            Ok(v) => (v, self.update(&g, total, lr)),
            Err(_) => (f64::NAN, f64::NAN),
        };
        Ok(TraceRecord {
            phase: Phase::Joint,
            step,
            lr,
            l_vt,
            l_ce: Some(l_ce),
            total: value,
            tau,
            grad_norm,
        })
    }
}

/// Run both phases (or the remainder after `opts.resume`). Training pairs are
/// `examples`; prompt exemplars are drawn from `pool`.
pub fn train(
    pipe: &mut Pipeline,
    examples: &[Example],
    pool: &[SignSample],
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(argument("training set is empty"));
    }
    let schedule = cfg.schedule(examples.len());
    if schedule.total > 0 && schedule.warmup >= schedule.total {
        return Err(argument(format!(
            "lr_warmup_steps ({}) must be below the total joint steps ({})",
            schedule.warmup, schedule.total
        )));
    }
    if !pipe.adapter.contains(LOG_TAU) {
        align::init_temperature(&mut pipe.adapter);
    }

    let mut opt = AdamW::new(cfg.adamw());
    let (mut phase, mut start) = (Phase::Warmup, 0);
    if let Some(ck) = opts.resume {
        ck.restore(pipe, &mut opt)?;
        (phase, start) = (ck.meta.phase, ck.meta.step);
        if phase == Phase::Warmup && start >= cfg.warmup_steps {
            (phase, start) = (Phase::Joint, 0);
        }
    }

    let table_hash_start = pipe.model.table.hash();
    let base_hash_start = pipe.model.params.hash_prefix(decoder::PREFIX);
    let lora_hash_warmup_start = pipe.model.params.hash_prefix(lora::PREFIX);
    let warm_sampler = BatchSampler::new(examples.len(), cfg.batch_size, mix(cfg.seed, 1))?;
    let joint_sampler = BatchSampler::new(examples.len(), cfg.batch_size, mix(cfg.seed, 2))?;

    let mut run = Run {
        pipe,
        examples,
        pool,
        cfg,
        opt,
        dir: opts.checkpoint_dir,
        checkpoints: Vec::new(),
    };
    let mut trace = Vec::new();
    let every = cfg.checkpoint_every;

    if phase == Phase::Warmup {
        set_phase_trainable(run.pipe, Phase::Warmup);
        for step in start..cfg.warmup_steps {
            let rec = run.warmup_step(&warm_sampler, step);
            let rec = run.guard(Phase::Warmup, step, rec)?;
            run.check(Phase::Warmup, step, &rec)?;
            trace.push(rec);
            let done = step + 1;
            if done < cfg.warmup_steps && every > 0 && done % every == 0 {
                run.save(Phase::Warmup, done)?;
            }
        }
        if cfg.warmup_steps > start {
            run.save(Phase::Warmup, cfg.warmup_steps)?;
        }
        (phase, start) = (Phase::Joint, 0);
    }
    let lora_hash_warmup_end = run.pipe.model.params.hash_prefix(lora::PREFIX);

    set_phase_trainable(run.pipe, Phase::Joint);
    let lora_identity_at_joint_start = if phase == Phase::Joint && start == 0 {
        let ex = &examples[0];
        let prompt = run.pipe.prompt_for(pool, &ex.translation, PromptMode::Train, train_prompt_seed(cfg.seed, 0, 0))?;
        Some(lora_is_identity(run.pipe, ex, &prompt)?)
    } else {
        None
    };
    for step in start..schedule.total {
        let rec = run.joint_step(&joint_sampler, step, schedule.lr_at(step));
        let rec = run.guard(Phase::Joint, step, rec)?;
        run.check(Phase::Joint, step, &rec)?;
        log::debug!("joint step {step}: total {:.4}", rec.total);
        trace.push(rec);
        let done = step + 1;
        if done < schedule.total && every > 0 && done % every == 0 {
            run.save(Phase::Joint, done)?;
        }
    }
    if schedule.total > start {
        run.save(Phase::Joint, schedule.total)?;
    }

    Ok(TrainReport {
        trace,
        checkpoints: run.checkpoints,
        table_hash_start,
        table_hash_end: run.pipe.model.table.hash(),
        base_hash_start,
        base_hash_end: run.pipe.model.params.hash_prefix(decoder::PREFIX),
        lora_hash_warmup_start,
        lora_hash_warmup_end,
        lora_identity_at_joint_start,
        total_joint_steps: schedule.total,
    })
}
