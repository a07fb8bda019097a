//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use slt_core::adapter::{self, AdapterConfig};
use slt_core::align::{self, AlignBatch};
use slt_core::analysis::{self, kde_entropy, metrics, visual_tokens, KdeConfig, Tokenizer};
use slt_core::autograd::{Graph, Mat, Var};
use slt_core::data::{generate_synthetic_corpus, Frame, SyntheticSpec};
use slt_core::llm::{apply_lora, DecoderConfig, DecoderModel, EmbeddingTable, GenerateConfig, Vocab};
use slt_core::motion::segment_clips;
use slt_core::params::ParamStore;
use slt_core::pipeline::{build_vocab, ModelConfig, Pipeline};
use slt_core::spatial::{s2_encode_frame, FrameEncoder, ToyFrameEncoder};
use slt_core::trainer::{self, train, TrainConfig, TrainOptions};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((r, c), || std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

// ---------------------------------------------------------------- 1

fn brute_windows(t: usize, w: usize, s: usize) -> Vec<(usize, usize)> {
    let len = t.max(w);
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= len {
        out.push((start, start + w));
        start += s;
    }
    out
}

fn segment_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut cases = 0;
    for w in [4, 8, 16] {
        for s in 1..=w {
            for t in 1..=512 {
                let got: Vec<(usize, usize)> = segment_clips(t, w, s)
                    .map_err(|e| e.to_string())?
                    .iter()
                    .map(|c| (c.start, c.end))
                    .collect();
                ensure(got == brute_windows(t, w, s), || format!("mismatch at T={t}, w={w}, s={s}"))?;
                cases += 1;
            }
        }
    }
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(10), || format!("took {el:?}"))?;
    Ok(format!("{cases} (T, w, s) cases, 0 mismatches, {el:.2?}"))
}

// ---------------------------------------------------------------- 2

/// Half-pixel bilinear resize, written independently of the library.
fn oracle_resize(f: &Frame, size: usize) -> Frame {
    let (h, w, c) = f.dim();
    let mut out = Array3::<f32>::zeros((size, size, c));
    for y in 0..size {
        for x in 0..size {
            let sy = (((y as f64 + 0.5) * h as f64 / size as f64) - 0.5).max(0.0).min((h - 1) as f64);
            let sx = (((x as f64 + 0.5) * w as f64 / size as f64) - 0.5).max(0.0).min((w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let a = f[[y0, x0, ch]] * (1.0 - fx) + f[[y0, x1, ch]] * fx;
                let b = f[[y1, x0, ch]] * (1.0 - fx) + f[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

fn s2_oracle() -> Outcome {
    let enc = ToyFrameEncoder::new(8, 4, 3, 12, 5).map_err(|e| e.to_string())?;
    let d = enc.embed_dim();
    let scales = [8, 16, 24];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let side = rng.random_range(6..40);
        let frame: Frame = Array3::from_shape_simple_fn((side, side, 3), || rng.random::<f32>());
        let got = s2_encode_frame(&frame, &enc, &scales).map_err(|e| e.to_string())?;
        ensure(got.len() == d * scales.len(), || format!("width {}", got.len()))?;
        for (k, &sc) in scales.iter().enumerate() {
            let big = oracle_resize(&frame, sc);
            let per = sc / 8;
            let mut acc = Array1::<f64>::zeros(d);
            for ty in 0..per {
                for tx in 0..per {
                    let sub = big.slice(s![ty * 8..ty * 8 + 8, tx * 8..tx * 8 + 8, ..]).to_owned();
                    acc += &enc.encode(&sub);
                }
            }
            acc /= (per * per) as f64;
            for j in 0..d {
                worst = worst.max((got[k * d + j] - acc[j]).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs deviation {worst:e}"))?;
    for _ in 0..100 {
        let frame: Frame = Array3::from_shape_simple_fn((8, 8, 3), || rng.random::<f32>());
        let single = s2_encode_frame(&frame, &enc, &[8]).map_err(|e| e.to_string())?;
        ensure(single == enc.encode(&frame), || "single-scale output is not bit-equal".into())?;
    }
    Ok(format!("100 frames, max abs deviation {worst:.1e}; single scale bit-equal"))
}

// ---------------------------------------------------------------- 3

fn alignment_closed_forms() -> Outcome {
    let one = AlignBatch::new(ndarray::array![[0.6, 0.8]], ndarray::array![[0.0, 1.0]]).map_err(|e| e.to_string())?;
    let l1 = align::vt_align_loss(&one, 1.0).map_err(|e| e.to_string())?;
    ensure(l1.abs() <= 1e-9, || format!("|B|=1 gave {l1}"))?;
    let eye = Mat::eye(2);
    let two = AlignBatch::new(eye.clone(), eye).map_err(|e| e.to_string())?;
    let mut details = vec![format!("|B|=1: {l1:.1e}")];
    for tau in [1.0f64, 2.0] {
        let got = align::vt_align_loss(&two, tau).map_err(|e| e.to_string())?;
        let want = (1.0 + (-tau).exp()).ln();
        ensure((got - want).abs() <= 1e-9, || format!("tau={tau}: {got} vs {want}"))?;
        details.push(format!("tau={tau}: |err| {:.1e}", (got - want).abs()));
    }
    Ok(details.join(", "))
}

// ---------------------------------------------------------------- 4

fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt() + b.mapv(|v| v * v).sum().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to the store entry `name`.
fn numeric_param_grad(store: &ParamStore, name: &str, f: &dyn Fn(&ParamStore) -> f64) -> Mat {
    let h = 1e-5;
    let shape = store.get(name).unwrap().value.raw_dim();
    let mut out = Mat::zeros(shape);
    let mut s = store.clone();
    for idx in ndarray::indices(out.raw_dim()) {
        let orig = s.get(name).unwrap().value[idx];
        s.get_mut(name).unwrap().value[idx] = orig + h;
        let up = f(&s);
        s.get_mut(name).unwrap().value[idx] = orig - h;
        let down = f(&s);
        s.get_mut(name).unwrap().value[idx] = orig;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

fn numeric_input_grad(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
    let h = 1e-5;
    let mut out = Mat::zeros(x.raw_dim());
    let mut xv = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xv[idx];
        xv[idx] = orig + h;
        let up = f(&xv);
        xv[idx] = orig - h;
        let down = f(&xv);
        xv[idx] = orig;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

const GRAD_TOL: f64 = 1e-4;

fn grad_alignment(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let b = rng.random_range(2..7);
    let d = rng.random_range(2..9);
    let s0 = gaussian(rng, b, d, 1.0);
    let t0 = gaussian(rng, b, d, 1.0);
    let lt0: f64 = rng.random_range(-0.5..2.0);
    // Loss as a function of raw (unnormalised) sign rows, text rows and log τ.
    let build = |g: &mut Graph, s: Var, t: Var, lt: Var| {
        let s = g.l2_normalize_rows(s);
        let t = g.l2_normalize_rows(t);
        align::contrastive_loss(g, s, t, lt)
    };
    let mut g = Graph::new();
    let (s, t) = (g.variable(s0.clone()), g.variable(t0.clone()));
    let lt = g.variable(Mat::from_elem((1, 1), lt0));
    let l = build(&mut g, s, t, lt);
    let grads = g.backward(l);
    let eval = |sv: &Mat, tv: &Mat, ltv: f64| {
        let mut g = Graph::new();
        let (s, t) = (g.constant(sv.clone()), g.constant(tv.clone()));
        let lt = g.constant(Mat::from_elem((1, 1), ltv));
        let l = build(&mut g, s, t, lt);
        g.scalar(l)
    };
    let ns = numeric_input_grad(&s0, &|x| eval(x, &t0, lt0));
    let nt = numeric_input_grad(&t0, &|x| eval(&s0, x, lt0));
    let nl = numeric_input_grad(&Mat::from_elem((1, 1), lt0), &|x| eval(&s0, &t0, x[[0, 0]]));
    Ok(rel_err(grads.get(s).unwrap(), &ns)
        .max(rel_err(grads.get(t).unwrap(), &nt))
        .max(rel_err(grads.get(lt).unwrap(), &nl)))
}

fn grad_translation(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, String> {
    let d = [4, 6, 8][rng.random_range(0..3)];
    let vocab = Vocab::build(["a b c d e f g"]);
    let table = EmbeddingTable::random(vocab, d, 1.0, seed).map_err(|e| e.to_string())?;
    let base = DecoderModel::new(DecoderConfig::toy(d), table, seed + 1).map_err(|e| e.to_string())?;
    let targets = base.all_weight_names();
    let mut m = apply_lora(base, 2, 4.0, &targets, seed + 2).map_err(|e| e.to_string())?;
    // Non-zero up-projections so every factor carries gradient.
    let names: Vec<String> = m.params.names().filter(|n| n.starts_with("lora.")).cloned().collect();
    for n in &names {
        let shape = m.params.get(n).unwrap().value.dim();
        m.params.get_mut(n).unwrap().value = gaussian(rng, shape.0, shape.1, 0.3);
    }
    let rows = rng.random_range(1..5);
    let sign0 = gaussian(rng, rows, d, 1.0);
    let prompt: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(4..11)).collect();
    let target: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(4..11)).collect();
    let pick = [names[rng.random_range(0..names.len())].clone(), names[rng.random_range(0..names.len())].clone()];

    let mut g = Graph::new();
    let sv = g.variable(sign0.clone());
    let l = m.translation_loss(&mut g, Some(sv), &prompt, &target).map_err(|e| e.to_string())?;
    let grads = g.backward(l);
    let pg = g.param_grads(&grads);
    let eval = |model: &DecoderModel, sign: &Mat| {
        let mut g = Graph::new();
        let s = g.constant(sign.clone());
        let l = model.translation_loss(&mut g, Some(s), &prompt, &target).unwrap();
        g.scalar(l)
    };
    let mut worst = rel_err(grads.get(sv).unwrap(), &numeric_input_grad(&sign0, &|x| eval(&m, x)));
    for name in &pick {
        let num = numeric_param_grad(&m.params, name, &|p| {
            let mut mm = m.clone();
            mm.params = p.clone();
            eval(&mm, &sign0)
        });
        worst = worst.max(rel_err(&pg[name], &num));
    }
    Ok(worst)
}

fn grad_adapter(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, String> {
    let cfg = AdapterConfig {
        spatial_dim: rng.random_range(2..6),
        motion_dim: rng.random_range(2..5),
        hidden: rng.random_range(2..5),
        out_dim: rng.random_range(2..5),
    };
    let store = cfg.init(seed).map_err(|e| e.to_string())?;
    let t = rng.random_range(2..9);
    let n = rng.random_range(2..5);
    let zs = gaussian(rng, t, cfg.spatial_dim, 1.0);
    let zm = gaussian(rng, n, cfg.motion_dim, 1.0);
    let out_rows = adapter::output_len(t, n);
    let probe = gaussian(rng, out_rows, cfg.out_dim, 1.0);
    let loss = |g: &mut Graph, st: &ParamStore, s: Var, m: Var| {
        let y = adapter::forward(g, st, s, m).unwrap();
        let p = g.constant(probe.clone());
        let y = g.mul(y, p);
        g.sum(y)
    };
    let mut g = Graph::new();
    let (s, m) = (g.variable(zs.clone()), g.variable(zm.clone()));
    let l = loss(&mut g, &store, s, m);
    let grads = g.backward(l);
    let pg = g.param_grads(&grads);
    let eval = |st: &ParamStore, a: &Mat, b: &Mat| {
        let mut g = Graph::new();
        let (s, m) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = loss(&mut g, st, s, m);
        g.scalar(l)
    };
    let mut worst = rel_err(grads.get(s).unwrap(), &numeric_input_grad(&zs, &|x| eval(&store, x, &zm)));
    worst = worst.max(rel_err(grads.get(m).unwrap(), &numeric_input_grad(&zm, &|x| eval(&store, &zs, x))));
    for name in store.names() {
        let num = numeric_param_grad(&store, name, &|p| eval(p, &zs, &zm));
        worst = worst.max(rel_err(&pg[name], &num));
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let configs = 24;
    let mut worst = [0.0f64; 3];
    for k in 0..configs {
        worst[0] = worst[0].max(grad_alignment(&mut rng)?);
        worst[1] = worst[1].max(grad_translation(&mut rng, 100 + k)?);
        worst[2] = worst[2].max(grad_adapter(&mut rng, 200 + k)?);
    }
    let labels = ["alignment", "translation", "adapter"];
    for (l, w) in labels.iter().zip(worst) {
        ensure(w <= GRAD_TOL, || format!("{l} relative error {w:e}"))?;
    }
    Ok(format!(
        "{configs} configs each; max rel. error alignment {:.1e}, translation {:.1e}, adapter {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

// ---------------------------------------------------------------- 5

fn length_law() -> Outcome {
    let cfg = AdapterConfig {
        spatial_dim: 3,
        motion_dim: 2,
        hidden: 2,
        out_dim: 2,
    };
    let store = cfg.init(1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0;
    for t in 2..=64 {
        for n in 2..=64 {
            let zs = gaussian(&mut rng, t, 3, 1.0);
            let zm = gaussian(&mut rng, n, 2, 1.0);
            let m = adapter::apply(&store, &zs, &zm).map_err(|e| e.to_string())?.0.nrows();
            let want = (t + n) / 4;
            ensure(m == want && adapter::output_len(t, n) == want, || format!("T={t}, N={n}: M={m}, want {want}"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (T, N) pairs"))
}

// ---------------------------------------------------------------- 6, 7

fn toy_pipeline() -> Result<(slt_core::data::Corpus, Pipeline), String> {
    let corpus = generate_synthetic_corpus(&SyntheticSpec::toy(7)).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::toy();
    let vocab = build_vocab(&corpus, &cfg.instruction);
    let pipe = Pipeline::new(cfg, vocab).map_err(|e| e.to_string())?;
    Ok((corpus, pipe))
}

fn warmup_efficacy() -> Outcome {
    let (corpus, mut pipe) = toy_pipeline()?;
    let examples = pipe.prepare(&corpus).map_err(|e| e.to_string())?;
    ensure(examples.len() == 32, || format!("{} samples", examples.len()))?;
    let cfg = TrainConfig {
        warmup_steps: 500,
        epochs: 0,
        ..TrainConfig::toy()
    };
    let report = train(&mut pipe, &examples, corpus.samples(), &cfg, TrainOptions::default()).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = report.trace.iter().map(|r| r.l_vt).collect();
    let initial = losses[0];
    let ln8 = 8f64.ln();
    ensure((initial - ln8).abs() <= 0.25 * ln8, || format!("initial loss {initial:.4} vs ln 8 = {ln8:.4}"))?;
    // Per-batch losses are noisy; require a 10-step moving average below the
    // threshold.
    let hit = (10..=losses.len()).find(|&k| losses[k - 10..k].iter().sum::<f64>() / 10.0 < 0.1 * initial);
    let Some(k) = hit else {
        return Err(format!(
            "10-step average never fell below {:.4} (last {:.4})",
            0.1 * initial,
            losses[losses.len() - 10..].iter().sum::<f64>() / 10.0
        ));
    };
    Ok(format!("initial {initial:.4} (ln 8 = {ln8:.4}); 10-step mean below 10% by step {k}"))
}

fn end_to_end_overfit() -> Outcome {
    let t0 = Instant::now();
    let (corpus, mut pipe) = toy_pipeline()?;
    let table_before = pipe.model.table.hash();
    let examples = pipe.prepare(&corpus).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::toy();
    let report = train(&mut pipe, &examples, corpus.samples(), &cfg, TrainOptions::default()).map_err(|e| e.to_string())?;
    let mut hyps = Vec::new();
    for ex in &examples {
        hyps.push(pipe.translate(ex, corpus.samples(), GenerateConfig::default(), 0).map_err(|e| e.to_string())?.text);
    }
    let elapsed = t0.elapsed();
    let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let r: Vec<&str> = examples.iter().map(|e| e.translation.as_str()).collect();
    let bleu4 = analysis::bleu(&h, &r, 4, Tokenizer::T13a).map_err(|e| e.to_string())?;
    ensure(report.invariants_hold(), || "invariant hashes changed".into())?;
    ensure(report.lora_identity_at_joint_start == Some(true), || "LoRA zero-init identity failed".into())?;
    ensure(pipe.model.table.hash() == table_before, || "embedding table changed".into())?;
    ensure(bleu4 >= 95.0, || format!("BLEU-4 {bleu4:.2}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "BLEU-4 {bleu4:.2} after {} + {} steps in {elapsed:.1?}; table/base/LoRA invariants hold",
        cfg.warmup_steps, report.total_joint_steps
    ))
}

// ---------------------------------------------------------------- 8

/// Second BLEU implementation: whitespace tokens, n-gram maps, exponential
/// smoothing.
fn reference_bleu(pairs: &[(String, String)], max_n: usize) -> f64 {
    let mut hits = vec![0.0; max_n];
    let mut totals = vec![0.0; max_n];
    let (mut c, mut r) = (0.0, 0.0);
    for (hyp, reference) in pairs {
        let hw: Vec<&str> = hyp.split(' ').filter(|w| !w.is_empty()).collect();
        let rw: Vec<&str> = reference.split(' ').filter(|w| !w.is_empty()).collect();
        c += hw.len() as f64;
        r += rw.len() as f64;
        for n in 1..=max_n {
            let mut rc: BTreeMap<Vec<&str>, i64> = BTreeMap::new();
            for i in 0..rw.len().saturating_sub(n - 1) {
                *rc.entry(rw[i..i + n].to_vec()).or_default() += 1;
            }
            for i in 0..hw.len().saturating_sub(n - 1) {
                totals[n - 1] += 1.0;
                if let Some(v) = rc.get_mut(&hw[i..i + n]) {
                    if *v > 0 {
                        *v -= 1;
                        hits[n - 1] += 1.0;
                    }
                }
            }
        }
    }
    let mut logsum = 0.0f64;
    let mut k = 1.0f64;
    for n in 0..max_n {
        if totals[n] == 0.0 {
            return 0.0;
        }
        let p: f64 = if hits[n] == 0.0 {
            k *= 2.0;
            1.0 / (k * totals[n])
        } else {
            hits[n] / totals[n]
        };
        logsum += p.ln();
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * (logsum / max_n as f64).exp()
}

fn metric_oracles() -> Outcome {
    let hand = analysis::bleu(&["a b c d"], &["a b c d e"], 4, Tokenizer::T13a).map_err(|e| e.to_string())?;
    ensure((hand - 77.88).abs() <= 0.01, || format!("hand example {hand}"))?;
    let words = ["rain", "sun", "wind", "snow", "cold", "warm"];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(4..12);
        (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let pairs: Vec<(String, String)> = (0..20).map(|_| (sentence(&mut rng), sentence(&mut rng))).collect();
    let h: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let r: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let mut worst = 0.0f64;
    for n in 1..=4 {
        let a = analysis::bleu(&h, &r, n, Tokenizer::T13a).map_err(|e| e.to_string())?;
        worst = worst.max((a - reference_bleu(&pairs, n)).abs());
    }
    for p in &pairs {
        let a = analysis::bleu(&[p.0.as_str()], &[p.1.as_str()], 4, Tokenizer::T13a).map_err(|e| e.to_string())?;
        worst = worst.max((a - reference_bleu(std::slice::from_ref(p), 4)).abs());
    }
    ensure(worst <= 0.01, || format!("independent scorer differs by {worst}"))?;
    let rouge = metrics::rouge_l("a c", "a b c").map_err(|e| e.to_string())?;
    ensure(rouge == 80.0, || format!("ROUGE-L {rouge}"))?;
    Ok(format!("hand BLEU-4 {hand:.4}; max |Δ| vs independent scorer {worst:.1e}; ROUGE-L {rouge}"))
}

// ---------------------------------------------------------------- 9

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let a = DMatrix::from_fn(d, d, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    let q = a.qr().q();
    Mat::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

fn kde_ordering() -> Outcome {
    let cfg = KdeConfig::default();
    let d = 16;
    let mut wins = 0;
    let mut worst_rot = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tight = gaussian(&mut rng, 100, d, 0.1);
        let loose = gaussian(&mut rng, 100, d, 1.0);
        let ht = kde_entropy(&tight, &cfg).map_err(|e| e.to_string())?;
        let hl = kde_entropy(&loose, &cfg).map_err(|e| e.to_string())?;
        if ht < hl {
            wins += 1;
        }
        let q = random_rotation(&mut rng, d);
        for x in [&tight, &loose] {
            let a = kde_entropy(x, &cfg).map_err(|e| e.to_string())?;
            let b = kde_entropy(&x.dot(&q), &cfg).map_err(|e| e.to_string())?;
            worst_rot = worst_rot.max((a - b).abs());
        }
    }
    ensure(wins == 10, || format!("ordering held {wins}/10"))?;
    ensure(worst_rot <= 1e-6, || format!("rotation changed entropy by {worst_rot:e}"))?;
    Ok(format!("H(σ=0.1) < H(σ=1.0) in 10/10 seeds; rotation |ΔH| ≤ {worst_rot:.1e}"))
}

// ---------------------------------------------------------------- 10

fn scan(z: &Mat, table: &Mat) -> Vec<(usize, f64)> {
    z.rows()
        .into_iter()
        .map(|row| {
            let d: Vec<f64> = table
                .rows()
                .into_iter()
                .map(|e| row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let id = d.iter().position(|&v| v == min).unwrap();
            (id, min.sqrt())
        })
        .collect()
}

fn visual_token_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut rows = 0;
    let mut ties = 0;
    for case in 0..60 {
        let v = rng.random_range(5..=512);
        let m = rng.random_range(1..=64);
        let words: Vec<String> = (0..v - 4).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::build(words.iter().map(String::as_str));
        let dim = rng.random_range(2..6);
        let integer = case % 2 == 0;
        // Small integer grids produce many exact distance ties.
        let draw = |rng: &mut ChaCha8Rng, r: usize| -> Mat {
            if integer {
                Mat::from_shape_simple_fn((r, dim), || rng.random_range(-2..=2) as f64)
            } else {
                gaussian(rng, r, dim, 1.0)
            }
        };
        let mut table = draw(&mut rng, v);
        if !integer {
            // Duplicate rows: identical distances.
            for _ in 0..v / 4 {
                let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
                let row = table.row(a).to_owned();
                table.row_mut(b).assign(&row);
            }
        }
        let z = draw(&mut rng, m);
        let t = EmbeddingTable::new(vocab, table.clone()).map_err(|e| e.to_string())?;
        let got = visual_tokens(&z, &t).map_err(|e| e.to_string())?;
        let want = scan(&z, &table);
        for (k, (g, (id, dist))) in got.tokens.iter().zip(&want).enumerate() {
            ensure(g.id == *id && g.distance == *dist, || {
                format!("case {case} row {k}: got ({}, {}), want ({id}, {dist})", g.id, g.distance)
            })?;
            let row = z.row(k);
            let d2: f64 = row.iter().zip(table.row(*id)).map(|(a, b)| (a - b) * (a - b)).sum();
            let n_min = table
                .rows()
                .into_iter()
                .filter(|e| row.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() == d2)
                .count();
            if n_min > 1 {
                ties += 1;
            }
            rows += 1;
        }
        let mut dedup: Vec<String> = Vec::new();
        for tok in &got.tokens {
            if dedup.last() != Some(&tok.word) {
                dedup.push(tok.word.clone());
            }
        }
        ensure(dedup == got.deduplicated, || format!("case {case}: dedup view differs"))?;
    }
    ensure(ties > 0, || "no tie cases were exercised".into())?;
    Ok(format!("{rows} rows over 60 instances, {ties} tied rows, 100% agreement"))
}

// ---------------------------------------------------------------- 11

fn schedule() -> Outcome {
    let full = TrainConfig::default();
    let mut details = Vec::new();
    for (cfg, n) in [(full.clone(), 8000usize), (full, 7113), (TrainConfig::toy(), 32)] {
        let s = cfg.schedule(n);
        let at_warm = trainer::lr_at(cfg.lr_warmup_steps, &cfg, n);
        let at_end = trainer::lr_at(s.total, &cfg, n);
        ensure(at_warm == cfg.peak_lr, || format!("lr_at(warm) = {at_warm:e}"))?;
        ensure(at_end == cfg.min_lr, || format!("lr_at(total) = {at_end:e}"))?;
        let w = s.warmup as f64;
        let jump = (s.ramp(w) - s.cosine(w)).abs();
        ensure(jump < 1e-12, || format!("junction jump {jump:e}"))?;
        let step_gap = (trainer::lr_at(cfg.lr_warmup_steps + 1, &cfg, n) - at_warm).abs();
        details.push(format!("total {}: jump {jump:.0e}, first cosine step Δ {step_gap:.1e}", s.total));
    }
    Ok(details.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("segment formula vs brute-force windows", segment_oracle),
        ("multi-scale blocks vs pooled sub-image oracle", s2_oracle),
        ("alignment loss closed forms", alignment_closed_forms),
        ("gradient checks (alignment, translation, adapter)", gradient_checks),
        ("adapter length law", length_law),
        ("alignment warm-up efficacy", warmup_efficacy),
        ("end-to-end two-phase overfit", end_to_end_overfit),
        ("BLEU / ROUGE-L oracles", metric_oracles),
        ("KDE entropy ordering and rotation invariance", kde_ordering),
        ("visual tokens vs exhaustive scan", visual_token_oracle),
        ("learning-rate schedule endpoints and continuity", schedule),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{:.1?}]", t0.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{:.1?}]", t0.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
