use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use slt_core::analysis::{
    kde_at_points, kde_entropy, metric_report, pca, scott_bandwidth, token_gloss_similarity_bow, visual_tokens, KdeConfig, MetricReport,
    SimilarityScores, Tokenizer,
};
use slt_core::analysis::tokens::VisualToken;
use slt_core::checkpoint::Checkpoint;
use slt_core::data::{
    generate_synthetic_corpus, load_manifest, write_manifest, Corpus, CorpusStats, LoadOptions, Split, SyntheticSpec,
    DEFAULT_SYNTHETIC_VOCAB,
};
use slt_core::llm::GenerateConfig;
use slt_core::pipeline::{build_vocab, ModelConfig, Pipeline};
use slt_core::spft;
use slt_core::trainer::{self, Phase, TrainConfig, TrainOptions};
use slt_core::Error;

use crate::run::{self, write_json, write_jsonl, InputHasher};
use crate::{plot, AnalyzeArgs, PrepareArgs, TokenizeArg, TrainArgs, TranslateArgs};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

fn args_json(a: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(a).expect("arguments serialise")
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("frame shape `{s}` is not HxWxC")))?;
    match dims[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(invalid(format!("frame shape `{s}` is not HxWxC"))),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    load_manifest(path, &LoadOptions::default()).with_context(|| format!("loading {}", path.display()))
}

fn non_empty_split(corpus: &Corpus, split: Split) -> Result<Corpus> {
    let part = corpus.split(split);
    if part.is_empty() {
        return Err(invalid(format!("corpus has no `{}` samples", split.as_str())));
    }
    Ok(part)
}

pub fn prepare(root: &Path, a: PrepareArgs) -> Result<PathBuf> {
    let frame_shape = a.frame_shape.as_deref().map(parse_shape).transpose()?;
    let args = args_json(&a);
    let mut hasher = InputHasher::new("prepare", &args);
    match (&a.manifest, a.synthetic) {
        (Some(_), true) => return Err(invalid("give either a manifest or --synthetic, not both")),
        (None, false) => return Err(invalid("nothing to prepare: give a manifest or --synthetic")),
        (Some(m), false) => hasher.path(m)?,
        (None, true) => {}
    }
    let run = run::start(root, a.out.as_deref(), "prepare", None, a.seed, args, hasher)?;

    let corpus = match &a.manifest {
        Some(m) => load_manifest(m, &LoadOptions { frame_shape }).with_context(|| format!("loading {}", m.display()))?,
        None => {
            let mut spec = SyntheticSpec::new(
                a.samples,
                DEFAULT_SYNTHETIC_VOCAB.iter().map(|s| s.to_string()).collect(),
                a.frames_per_word,
                a.seed,
            );
            if let Some(shape) = frame_shape {
                spec.frame_shape = shape;
            }
            generate_synthetic_corpus(&spec)?
        }
    };
    let corpus_dir = run.output_dir.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(|e| Error::io(&corpus_dir, e))?;
    write_manifest(&corpus, &corpus_dir.join("manifest.jsonl"))?;
    let stats: CorpusStats = corpus.stats();
    write_json(&run.output_dir.join("stats.json"), &stats)?;
    log::info!(
        "{} samples, vocabulary {}, {:.1} frames on average",
        corpus.len(),
        stats.vocab_size,
        stats.avg_frames
    );
    Ok(run.output_dir)
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

pub fn train(root: &Path, a: TrainArgs) -> Result<PathBuf> {
    let resume = a
        .resume
        .as_deref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let mut cfg = match (&a.config, &resume) {
        (Some(p), _) => RunConfig::load(p)?,
        // Without a config file a resumed run continues with its own settings.
        (None, Some(ck)) => RunConfig {
            model: ck.meta.model.clone(),
            train: ck.meta.train.clone(),
        },
        (None, None) => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.warmup_steps = a.warmup_steps.unwrap_or(t.warmup_steps);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.peak_lr = a.peak_lr.unwrap_or(t.peak_lr);
    t.min_lr = a.min_lr.unwrap_or(t.min_lr);
    t.seed = a.seed.unwrap_or(t.seed);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    t.validate()?;

    let args = args_json(&a);
    let mut hasher = InputHasher::new("train", &args);
    hasher.path(&a.corpus)?;
    if let Some(p) = &a.config {
        hasher.path(p)?;
    }
    if let Some(p) = &a.resume {
        hasher.path(p)?;
    }
    let run = run::start(root, a.out.as_deref(), "train", a.config.as_deref(), cfg.train.seed, args, hasher)?;
    let effective = toml::to_string(&cfg)?;
    fs::write(run.output_dir.join("config.toml"), effective).map_err(|e| Error::io(&run.output_dir, e))?;

    let corpus = load_corpus(&a.corpus)?;
    let train_split = non_empty_split(&corpus, Split::Train)?;
    let vocab = build_vocab(&corpus, &cfg.model.instruction);
    let mut pipe = Pipeline::new(cfg.model.clone(), vocab)?;
    let examples = pipe.prepare(&train_split)?;
    let opts = TrainOptions {
        checkpoint_dir: Some(run.output_dir.join("checkpoints")),
        resume,
    };
    let report = trainer::train(&mut pipe, &examples, train_split.samples(), &cfg.train, opts)?;
    write_jsonl(&run.output_dir.join("trace.jsonl"), &report.trace)?;
    let mut summary = serde_json::to_value(&report)?;
    summary["invariants_hold"] = report.invariants_hold().into();
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("trace");
    }
    write_json(&run.output_dir.join("report.json"), &summary)?;
    if let Some(last) = report.trace.last() {
        log::info!(
            "{} steps; last {} step {}: total loss {:.4}",
            report.trace.len(),
            last.phase.as_str(),
            last.step,
            last.total
        );
    }
    Ok(run.output_dir)
}

/// A checkpoint directory, or the most advanced checkpoint of a train run.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("meta.json").exists() {
        return Ok(path.to_path_buf());
    }
    let dir = path.join("checkpoints");
    let mut best: Option<((u8, usize), PathBuf)> = None;
    if let Ok(entries) = fs::read_dir(&dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            let Some((phase, step)) = name.split_once('-') else { continue };
            let rank = match phase {
                "warmup" => 0,
                "joint" => 1,
                _ => continue,
            };
            let (Ok(step), true) = (step.parse::<usize>(), e.path().join("meta.json").exists()) else {
                continue;
            };
            if best.as_ref().is_none_or(|(k, _)| (rank, step) > *k) {
                best = Some(((rank, step), e.path()));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint found"),
        )
        .into()
    })
}

fn load_pipeline(path: &Path) -> Result<(Pipeline, PathBuf)> {
    let dir = resolve_checkpoint(path)?;
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if ck.meta.phase != Phase::Joint {
        log::warn!("checkpoint {} precedes joint training", dir.display());
    }
    Ok((ck.into_pipeline()?, dir))
}

/// Every word the pipeline will encode must be known to the checkpoint.
fn check_vocab(pipe: &Pipeline, corpus: &Corpus) -> Result<()> {
    let vocab = pipe.model.vocab();
    for s in corpus.samples() {
        let texts = std::iter::once(&s.translation).chain(s.sources.iter().map(|t| &t.text));
        for text in texts {
            if let Some(w) = text.split_whitespace().find(|w| vocab.id(w).is_none()) {
                return Err(invalid(format!(
                    "checkpoint/vocabulary mismatch: word `{w}` of sample `{}` is not in the checkpoint vocabulary",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

pub fn translate(root: &Path, a: TranslateArgs) -> Result<PathBuf> {
    if a.beam == 0 {
        return Err(invalid("--beam must be at least 1"));
    }
    let checkpoint = resolve_checkpoint(&a.checkpoint)?;
    let args = args_json(&a);
    let mut hasher = InputHasher::new("translate", &args);
    hasher.path(&checkpoint)?;
    hasher.path(&a.corpus)?;
    let run = run::start(root, a.out.as_deref(), "translate", None, a.seed, args, hasher)?;

    let (pipe, _) = load_pipeline(&checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let part = non_empty_split(&corpus, a.split.into())?;
    let pool = non_empty_split(&corpus, Split::Train)?;
    check_vocab(&pipe, &part)?;
    check_vocab(&pipe, &pool)?;
    let examples = pipe.prepare(&part)?;
    let gen = GenerateConfig {
        max_len: a.max_len,
        beam: a.beam,
    };
    let records = examples
        .iter()
        .map(|ex| {
            let out = pipe.translate(ex, pool.samples(), gen, a.seed)?;
            Ok(HypothesisRecord {
                id: ex.id.clone(),
                hypothesis: out.text,
                reference: ex.translation.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&run.output_dir.join("hypotheses.jsonl"), &records)?;
    let lines = |f: fn(&HypothesisRecord) -> &str| records.iter().map(|r| format!("{}\n", f(r))).collect::<String>();
    fs::write(run.output_dir.join("hypotheses.txt"), lines(|r| &r.hypothesis))
        .map_err(|e| Error::io(&run.output_dir, e))?;
    fs::write(run.output_dir.join("references.txt"), lines(|r| &r.reference))
        .map_err(|e| Error::io(&run.output_dir, e))?;
    let exact = records.iter().filter(|r| r.hypothesis == r.reference).count();
    log::info!("{} samples translated, {exact} exact matches", records.len());
    Ok(run.output_dir)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// `(hypotheses, references)` from a JSONL record file or two line files.
fn read_pairs(hyp: &Path, refs: Option<&Path>) -> Result<(Vec<String>, Vec<String>)> {
    let (hyps, jsonl_refs) = if hyp.extension().is_some_and(|e| e == "jsonl") {
        let mut h = Vec::new();
        let mut r = Vec::new();
        for (i, line) in read_lines(hyp)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: HypothesisRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{}: {e}", hyp.display()),
            })?;
            h.push(rec.hypothesis);
            r.push(rec.reference);
        }
        (h, Some(r))
    } else {
        (read_lines(hyp)?, None)
    };
    let refs = match (refs, jsonl_refs) {
        (Some(p), _) => read_lines(p)?,
        (None, Some(r)) => r,
        (None, None) => return Err(invalid("plain-text hypotheses need --references")),
    };
    if hyps.len() != refs.len() {
        return Err(invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok((hyps, refs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeEntry {
    pub input: PathBuf,
    pub rows: usize,
    pub entropy: f64,
    /// Sum of the density estimates at the sample points.
    pub density_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTokenRecord {
    pub id: String,
    pub tokens: Vec<VisualToken>,
    pub deduplicated: Vec<String>,
    pub reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTokenSummary {
    pub checkpoint: PathBuf,
    pub samples: usize,
    /// Mean similarity over samples with glosses.
    pub mean_similarity: Option<SimilarityScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub metrics: Option<MetricReport>,
    pub kde: Vec<KdeEntry>,
    pub visual_tokens: Option<VisualTokenSummary>,
}

impl AnalysisReport {
    fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.metrics {
            out += &format!(
                "BLEU-1 {:.2}  BLEU-2 {:.2}  BLEU-3 {:.2}  BLEU-4 {:.2}  ROUGE-L {:.2}  BLEURT {}\n",
                m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.bleurt
            );
            out += &format!("{} sentences  {}\n", m.num_hypotheses, m.signature);
        }
        for k in &self.kde {
            out += &format!("KDE entropy {:.4}  ({} rows, {})\n", k.entropy, k.rows, k.input.display());
        }
        if let Some(v) = &self.visual_tokens {
            out += &format!("visual tokens for {} samples\n", v.samples);
            if let Some(s) = v.mean_similarity {
                out += &format!(
                    "similarity gloss/translation {:.4}  visual/translation {:.4}  visual/gloss {:.4}\n",
                    s.gloss_translation, s.visual_translation, s.visual_gloss
                );
            }
        }
        out
    }
}

fn mean_scores(scores: &[SimilarityScores]) -> Option<SimilarityScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let avg = |f: fn(&SimilarityScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Some(SimilarityScores {
        gloss_translation: avg(|s| s.gloss_translation),
        visual_translation: avg(|s| s.visual_translation),
        visual_gloss: avg(|s| s.visual_gloss),
    })
}

pub fn analyze(root: &Path, a: AnalyzeArgs) -> Result<PathBuf> {
    if a.hypotheses.is_none() && a.kde.is_empty() && !a.visual_tokens {
        return Err(invalid("nothing to analyze: give --hypotheses, --kde or --visual-tokens"));
    }
    if a.references.is_some() && a.hypotheses.is_none() {
        return Err(invalid("--references needs --hypotheses"));
    }
    let vt_inputs = if a.visual_tokens {
        match (&a.checkpoint, &a.corpus) {
            (Some(c), Some(m)) => Some((resolve_checkpoint(c)?, m.clone())),
            _ => return Err(invalid("--visual-tokens needs --checkpoint and --corpus")),
        }
    } else {
        None
    };
    let args = args_json(&a);
    let mut hasher = InputHasher::new("analyze", &args);
    for p in a.hypotheses.iter().chain(&a.references).chain(&a.kde) {
        hasher.path(p)?;
    }
    if let Some((c, m)) = &vt_inputs {
        hasher.path(c)?;
        hasher.path(m)?;
    }
    let run = run::start(root, a.out.as_deref(), "analyze", None, 0, args, hasher)?;
    let mut report = AnalysisReport::default();

    if let Some(h) = &a.hypotheses {
        let (hyps, refs) = read_pairs(h, a.references.as_deref())?;
        let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        let tok = match a.tokenize {
            TokenizeArg::T13a => Tokenizer::T13a,
            TokenizeArg::Zh => Tokenizer::Zh,
        };
        report.metrics = Some(metric_report(&hyps, &refs, tok)?);
    }

    let kde_cfg = KdeConfig {
        pca_dims: a.pca_dims,
        bandwidth: a.bandwidth,
    };
    let mut projections = Vec::new();
    for p in &a.kde {
        let m = spft::read_matrix(p)?;
        let entropy = kde_entropy(&m, &kde_cfg).with_context(|| format!("KDE of {}", p.display()))?;
        let z = pca(&m, kde_cfg.pca_dims)?;
        let h = kde_cfg.bandwidth.unwrap_or_else(|| scott_bandwidth(&z));
        report.kde.push(KdeEntry {
            input: p.clone(),
            rows: m.nrows(),
            entropy,
            density_sum: kde_at_points(&z, h).iter().sum(),
        });
        if a.plot {
            projections.push(pca(&m, 2.min(m.ncols()).min(m.nrows()))?);
        }
    }
    for (i, z) in projections.iter().enumerate() {
        plot::scatter(&run.output_dir.join(format!("kde-{i}.png")), &[z])?;
    }

    if let Some((checkpoint, manifest)) = vt_inputs {
        let (pipe, _) = load_pipeline(&checkpoint)?;
        let corpus = load_corpus(&manifest)?;
        let part = non_empty_split(&corpus, a.split.into())?;
        check_vocab(&pipe, &part)?;
        let examples = pipe.prepare(&part)?;
        let mut rows = Vec::with_capacity(examples.len());
        let mut scores = Vec::new();
        let mut features = Vec::new();
        for (ex, sample) in examples.iter().zip(part.samples()) {
            let z = pipe.sign_feature(ex)?;
            let vt = visual_tokens(&z, &pipe.model.table)?;
            let similarity = match sample.gloss_words() {
                Some(g) if !g.is_empty() && !vt.deduplicated.is_empty() => {
                    let visual: Vec<&str> = vt.deduplicated.iter().map(String::as_str).collect();
                    Some(token_gloss_similarity_bow(&visual, &g, &sample.translation_words())?)
                }
                _ => None,
            };
            scores.extend(similarity);
            if a.plot {
                features.push(z);
            }
            rows.push(VisualTokenRecord {
                id: ex.id.clone(),
                tokens: vt.tokens,
                deduplicated: vt.deduplicated,
                reference: ex.translation.clone(),
                similarity,
            });
        }
        write_jsonl(&run.output_dir.join("visual_tokens.jsonl"), &rows)?;
        if a.plot && !features.is_empty() {
            let views: Vec<_> = features.iter().map(|f| f.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views)?;
            if stacked.nrows() >= 2 {
                plot::scatter(&run.output_dir.join("sign-features.png"), &[&pca(&stacked, 2)?])?;
            }
        }
        report.visual_tokens = Some(VisualTokenSummary {
            checkpoint,
            samples: rows.len(),
            mean_similarity: mean_scores(&scores),
        });
    }

    write_json(&run.output_dir.join("report.json"), &report)?;
    let text = report.to_text();
    fs::write(run.output_dir.join("report.txt"), &text).map_err(|e| Error::io(&run.output_dir, e))?;
    eprint!("{text}");
    Ok(run.output_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("16x16x3").unwrap(), (16, 16, 3));
        assert_eq!(parse_shape("8,8,1").unwrap(), (8, 8, 1));
        assert!(parse_shape("16x16").is_err());
    }

    #[test]
    fn default_config_is_full_scale_training_setup() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!((c.train.beta1, c.train.beta2, c.train.weight_decay, c.train.peak_lr), (0.9, 0.98, 0.01, 1e-4));
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let full = RunConfig::load(&dir.join("default.toml")).unwrap();
        assert_eq!(full, RunConfig::default());
        let toy = RunConfig::load(&dir.join("toy.toml")).unwrap();
        assert_eq!(toy.train, TrainConfig::toy());
        assert_eq!(toy.model, ModelConfig::toy());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[trian]\nepochs = 1").is_err());
    }

    #[test]
    fn mean_of_scores() {
        let s = |x| SimilarityScores {
            gloss_translation: x,
            visual_translation: x,
            visual_gloss: x,
        };
        assert!((mean_scores(&[s(0.2), s(0.4)]).unwrap().visual_gloss - 0.3).abs() < 1e-12);
        assert!(mean_scores(&[]).is_none());
    }
}
