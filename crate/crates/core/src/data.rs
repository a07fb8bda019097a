//! Corpus representation, manifest I/O, synthetic corpora and feature ingestion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{argument, validation, Error, Result};
use crate::motion;
use crate::spft;

/// One video frame, `H × W × C`, values in `[0, 1]`.
pub type Frame = Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(argument(format!("unknown split `{other}`"))),
        }
    }
}

/// A frame sequence whose frames all share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: Vec<Frame>,
}

impl Video {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(validation("a video needs at least one frame"));
        };
        let shape = first.dim();
        if let Some(i) = frames.iter().position(|f| f.dim() != shape) {
            return Err(validation(format!(
                "frame {i} has shape {:?}, frame 0 has {shape:?}",
                frames[i].dim()
            )));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)` shared by every frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    fn to_spft(&self) -> (Vec<usize>, Vec<f64>) {
        let (h, w, c) = self.frame_shape();
        let data = self
            .frames
            .iter()
            .flat_map(|f| f.iter().map(|&v| v as f64))
            .collect();
        (vec![self.len(), h, w, c], data)
    }

    fn from_spft(t: spft::Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        if dims.len() != 4 {
            return Err(validation(format!(
                "frame file must be rank 4 (T, H, W, C), found {dims:?}"
            )));
        }
        let per = dims[1] * dims[2] * dims[3];
        let frames = t
            .data
            .chunks_exact(per.max(1))
            .map(|c| {
                Frame::from_shape_vec(
                    (dims[1], dims[2], dims[3]),
                    c.iter().map(|&v| v as f32).collect(),
                )
                .expect("chunk matches frame shape")
            })
            .collect();
        Video::new(frames)
    }
}

/// Where a sample's frames live.
#[derive(Clone, Debug)]
pub enum FrameSource {
    Loaded(Arc<Video>),
    /// SPFT file on disk; the header was validated at load time.
    File { path: PathBuf, num_frames: usize },
    /// Metadata-only record (statistics, precomputed-feature workflows).
    Absent { num_frames: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub language: String,
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct SignSample {
    pub id: String,
    pub split: Split,
    pub frames: FrameSource,
    pub translation: String,
    pub gloss: Option<String>,
    pub language: String,
    /// Precomputed renditions of `translation` in other languages, used as
    /// in-context exemplar sources.
    pub sources: Vec<SourceText>,
}

impl SignSample {
    pub fn num_frames(&self) -> usize {
        match &self.frames {
            FrameSource::Loaded(v) => v.len(),
            FrameSource::File { num_frames, .. } | FrameSource::Absent { num_frames } => *num_frames,
        }
    }

    pub fn translation_words(&self) -> Vec<&str> {
        self.translation.split_whitespace().collect()
    }

    pub fn gloss_words(&self) -> Option<Vec<&str>> {
        self.gloss.as_ref().map(|g| g.split_whitespace().collect())
    }

    /// Materialise the frames, reading the SPFT payload if necessary.
    pub fn load_video(&self) -> Result<Arc<Video>> {
        match &self.frames {
            FrameSource::Loaded(v) => Ok(v.clone()),
            FrameSource::File { path, .. } => Ok(Arc::new(Video::from_spft(spft::read(path)?)?)),
            FrameSource::Absent { .. } => Err(validation(format!(
                "sample `{}` has no frames (metadata-only record)",
                self.id
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_frames() == 0 {
            return Err(validation(format!("sample `{}` has no frames", self.id)));
        }
        if self.translation.split_whitespace().next().is_none() {
            return Err(validation(format!("sample `{}` has an empty translation", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_samples: BTreeMap<Split, usize>,
    pub vocab_size: usize,
    pub avg_frames: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    samples: Vec<SignSample>,
}

impl Corpus {
    /// Build a corpus, rejecting duplicate ids within a split and samples that
    /// break the per-sample invariants.
    pub fn new(samples: Vec<SignSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert((s.split, s.id.as_str())) {
                return Err(validation(format!(
                    "duplicate sample id `{}` in split {}",
                    s.id,
                    s.split.as_str()
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[SignSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Corpus {
        Corpus {
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let mut num_samples: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
        let mut vocab = BTreeSet::new();
        let mut frames = 0usize;
        for s in &self.samples {
            *num_samples.entry(s.split).or_default() += 1;
            vocab.extend(s.translation_words());
            frames += s.num_frames();
        }
        let avg_frames = if self.samples.is_empty() {
            0.0
        } else {
            frames as f64 / self.samples.len() as f64
        };
        CorpusStats {
            num_samples,
            vocab_size: vocab.len(),
            avg_frames,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_frames: Option<usize>,
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss: Option<String>,
    pub language: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceText>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Required `(H, W, C)` of every frame file, if known.
    pub frame_shape: Option<(usize, usize, usize)>,
}

/// Parse a line-delimited JSON manifest. Frame paths are resolved relative to
/// the manifest's directory; only frame-file headers are read here.
pub fn load_manifest(path: &Path, opts: &LoadOptions) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(record_to_sample(rec, &base, opts, line_no)?);
    }
    Corpus::new(samples)
}

fn record_to_sample(rec: ManifestRecord, base: &Path, opts: &LoadOptions, line: usize) -> Result<SignSample> {
    let frames = match (&rec.frames_path, rec.num_frames) {
        (Some(p), declared) => {
            let path = base.join(p);
            let header = spft::read_header(&path)?;
            if header.dims.len() != 4 {
                return Err(validation(format!(
                    "sample `{}`: frame file must be rank 4 (T, H, W, C), found {:?}",
                    rec.id, header.dims
                )));
            }
            let (t, shape) = (header.dims[0], (header.dims[1], header.dims[2], header.dims[3]));
            if let Some(expected) = opts.frame_shape {
                if shape != expected {
                    return Err(validation(format!(
                        "sample `{}`: frame shape (H, W, C) = {shape:?}, expected {expected:?}",
                        rec.id
                    )));
                }
            }
            if let Some(n) = declared {
                if n != t {
                    return Err(validation(format!(
                        "sample `{}`: num_frames = {n} but frame file holds {t}",
                        rec.id
                    )));
                }
            }
            FrameSource::File { path, num_frames: t }
        }
        (None, Some(n)) => FrameSource::Absent { num_frames: n },
        (None, None) => {
            return Err(Error::Parse {
                line,
                message: format!("record `{}` needs frames_path or num_frames", rec.id),
            })
        }
    };
    Ok(SignSample {
        id: rec.id,
        split: rec.split,
        frames,
        translation: rec.translation,
        gloss: rec.gloss,
        language: rec.language,
        sources: rec.sources,
    })
}

/// Write `corpus` as a manifest at `path`. In-memory videos are stored as
/// SPFT files under `<manifest dir>/frames/`.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let frames_dir = base.join("frames");
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in corpus.samples() {
        let (frames_path, num_frames) = match &s.frames {
            FrameSource::Loaded(v) => {
                fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
                let rel = format!("frames/{}.{}.spft", s.split.as_str(), s.id);
                let (dims, data) = v.to_spft();
                spft::write(&base.join(&rel), &dims, &data, spft::DType::F32)?;
                (Some(rel), Some(v.len()))
            }
            FrameSource::File { path: p, num_frames } => {
                let rel = p
                    .strip_prefix(&base)
                    .map(|r| r.to_string_lossy().into_owned())
                    .unwrap_or_else(|_| p.to_string_lossy().into_owned());
                (Some(rel), Some(*num_frames))
            }
            FrameSource::Absent { num_frames } => (None, Some(*num_frames)),
        };
        let rec = ManifestRecord {
            id: s.id.clone(),
            split: s.split,
            frames_path,
            num_frames,
            translation: s.translation.clone(),
            gloss: s.gloss.clone(),
            language: s.language.clone(),
            sources: s.sources.clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parameters for [`generate_synthetic_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub vocab: Vec<String>,
    pub frames_per_word: usize,
    pub seed: u64,
    pub frame_shape: (usize, usize, usize),
    pub min_words: usize,
    pub max_words: usize,
    pub split: Split,
}

pub const DEFAULT_SYNTHETIC_VOCAB: [&str; 10] = [
    "rain", "sun", "wind", "snow", "cloud", "north", "south", "cold", "warm", "fog",
];

impl SyntheticSpec {
    pub fn new(num_samples: usize, vocab: Vec<String>, frames_per_word: usize, seed: u64) -> Self {
        Self {
            num_samples,
            vocab,
            frames_per_word,
            seed,
            frame_shape: (16, 16, 3),
            min_words: 2,
            max_words: 4,
            split: Split::Train,
        }
    }

    /// 32 samples over the ten-word default vocabulary, 16 frames per word.
    pub fn toy(seed: u64) -> Self {
        Self::new(
            32,
            DEFAULT_SYNTHETIC_VOCAB.iter().map(|s| s.to_string()).collect(),
            16,
            seed,
        )
    }
}

/// Pseudo-language rendition used as the exemplar source text of synthetic
/// samples.
pub fn synthetic_source_word(word: &str) -> String {
    word.chars().rev().collect()
}

/// Deterministic toy corpus. Each vocabulary word owns a smooth pseudo-random
/// base image that drifts with a word-specific velocity, so both appearance
/// and motion identify the word. Sentences are drawn without repeating a
/// word bag, so no two samples share the same multiset of words.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.vocab.is_empty() {
        return Err(argument("synthetic corpus needs a nonempty vocabulary"));
    }
    if spec.num_samples == 0 {
        return Err(argument("num_samples must be at least 1"));
    }
    if spec.frames_per_word == 0 {
        return Err(argument("frames_per_word must be at least 1"));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(argument("need 1 <= min_words <= max_words"));
    }
    let (h, w, c) = spec.frame_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(argument("frame shape must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<WordPattern> = (0..spec.vocab.len())
        .map(|_| WordPattern::random(&mut rng, spec.frame_shape))
        .collect();

    let mut bags = HashSet::new();
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut attempts = 0usize;
    while samples.len() < spec.num_samples {
        attempts += 1;
        if attempts > 1000 * spec.num_samples + 1000 {
            return Err(argument(format!(
                "cannot draw {} distinct word bags from {} words",
                spec.num_samples,
                spec.vocab.len()
            )));
        }
        let len = rng.random_range(spec.min_words..=spec.max_words);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab.len())).collect();
        let mut bag = words.clone();
        bag.sort_unstable();
        if !bags.insert(bag) {
            continue;
        }
        let mut frames = Vec::with_capacity(len * spec.frames_per_word);
        for &wi in &words {
            for j in 0..spec.frames_per_word {
                frames.push(patterns[wi].frame(j));
            }
        }
        let translation = words.iter().map(|&i| spec.vocab[i].as_str()).collect::<Vec<_>>().join(" ");
        let source = words
            .iter()
            .map(|&i| synthetic_source_word(&spec.vocab[i]))
            .collect::<Vec<_>>()
            .join(" ");
        let gloss = words
            .iter()
            .map(|&i| spec.vocab[i].to_uppercase())
            .collect::<Vec<_>>()
            .join(" ");
        samples.push(SignSample {
            id: format!("syn-{:04}", samples.len()),
            split: spec.split,
            frames: FrameSource::Loaded(Arc::new(Video::new(frames)?)),
            translation,
            gloss: Some(gloss),
            language: "syn".into(),
            sources: vec![SourceText {
                language: "rev".into(),
                text: source,
            }],
        });
    }
    Corpus::new(samples)
}

struct WordPattern {
    base: Frame,
    velocity: (f32, f32),
}

impl WordPattern {
    fn random(rng: &mut ChaCha8Rng, (h, w, c): (usize, usize, usize)) -> Self {
        // Smooth base: a 4×4 random control grid bilinearly upsampled.
        let grid = Array3::from_shape_simple_fn((4, 4, c), || rng.random_range(0.1f32..0.9));
        let base = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            let gy = y as f32 * 3.0 / (h.max(2) - 1) as f32;
            let gx = x as f32 * 3.0 / (w.max(2) - 1) as f32;
            sample_clamped(&grid, gy, gx, ch)
        });
        let mut dirs = [(-1.0f32, 0.0f32), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0), (1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
        dirs.shuffle(rng);
        let speed = rng.random_range(0.25f32..0.75);
        Self {
            base,
            velocity: (dirs[0].0 * speed, dirs[0].1 * speed),
        }
    }

    fn frame(&self, j: usize) -> Frame {
        let (h, w, c) = self.base.dim();
        let (vy, vx) = self.velocity;
        let (dy, dx) = (vy * j as f32, vx * j as f32);
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            sample_wrapped(&self.base, y as f32 - dy, x as f32 - dx, ch)
        })
    }
}

fn sample_clamped(img: &Frame, y: f32, x: f32, ch: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
    let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_wrapped(img: &Frame, y: f32, x: f32, ch: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = y.rem_euclid(h as f32);
    let x = x.rem_euclid(w as f32);
    let (y0, x0) = (y.floor() as usize % h, x.floor() as usize % w);
    let (y1, x1) = ((y0 + 1) % h, (x0 + 1) % w);
    let (fy, fx) = (y - y.floor(), x - x.floor());
    let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
    let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bot * fy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Spatial,
    Motion,
}

/// Expected layout of an ingested feature matrix.
#[derive(Clone, Debug)]
pub struct FeatureContract {
    pub kind: FeatureKind,
    /// Encoder embedding width `d`.
    pub embed_dim: usize,
    /// Number of S² scales `k` (spatial only).
    pub num_scales: usize,
    /// Source video length, if rows should be checked against it.
    pub num_frames: Option<usize>,
    pub window: usize,
    pub stride: usize,
}

impl FeatureContract {
    pub fn spatial(embed_dim: usize, num_scales: usize) -> Self {
        Self {
            kind: FeatureKind::Spatial,
            embed_dim,
            num_scales,
            num_frames: None,
            window: 16,
            stride: 8,
        }
    }

    pub fn motion(embed_dim: usize) -> Self {
        Self {
            kind: FeatureKind::Motion,
            embed_dim,
            num_scales: 1,
            num_frames: None,
            window: 16,
            stride: 8,
        }
    }

    pub fn with_frames(mut self, t: usize) -> Self {
        self.num_frames = Some(t);
        self
    }
}

/// Read a precomputed feature matrix (`T × k·d` spatial or `N × d` motion)
/// from an SPFT file and validate its shape header.
pub fn ingest_features(path: &Path, contract: &FeatureContract) -> Result<Mat> {
    let header = spft::read_header(path)?;
    check_feature_header(&header.dims, contract)?;
    spft::read_matrix(path)
}

pub fn check_feature_header(dims: &[usize], contract: &FeatureContract) -> Result<()> {
    if dims.len() != 2 {
        return Err(validation(format!(
            "feature file must be a rank-2 matrix, found dims {dims:?}"
        )));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let (want_cols, want_rows) = match contract.kind {
        FeatureKind::Spatial => (contract.embed_dim * contract.num_scales, contract.num_frames),
        FeatureKind::Motion => (
            contract.embed_dim,
            contract
                .num_frames
                .map(|t| motion::num_segments(t, contract.window, contract.stride))
                .transpose()?,
        ),
    };
    if cols != want_cols {
        return Err(validation(format!(
            "{:?} features have {cols} columns, expected {want_cols}",
            contract.kind
        )));
    }
    if rows == 0 {
        return Err(validation("feature matrix has no rows"));
    }
    if let Some(r) = want_rows {
        if rows != r {
            return Err(validation(format!(
                "{:?} features have {rows} rows, expected {r}",
                contract.kind
            )));
        }
    }
    Ok(())
}
