use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use slt_core::checkpoint::Checkpoint;
use slt_core::data::{load_manifest, LoadOptions, Split};
use slt_core::spft::{self, DType};

fn slt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slt"))
        .args(args)
        .env("SLT_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Run and return the printed output directory.
fn ok(root: &Path, args: &[&str]) -> PathBuf {
    let out = slt(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn prepare_synthetic(root: &Path, samples: &str) -> PathBuf {
    ok(root, &["prepare", "--synthetic", "--samples", samples, "--seed", "7"]).join("corpus/manifest.jsonl")
}

const SMALL: &str = "
[train]
warmup_steps = 20
epochs = 10
peak_lr = 3e-3
min_lr = 3e-4
lr_warmup_steps = 5
align_lr = 1e-3
seed = 3
";

const OVERFIT: &str = "
[model]
lora_targets = \"all\"

[train]
warmup_steps = 100
epochs = 1500
peak_lr = 3e-3
min_lr = 3e-4
lr_warmup_steps = 20
align_lr = 1e-3
seed = 3
";

/// An 8-sample corpus and a checkpoint trained to memorise it, shared by
/// the slower tests.
fn overfit() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static RUN: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let manifest = prepare_synthetic(root.path(), "8");
        let cfg = root.path().join("overfit.toml");
        fs::write(&cfg, OVERFIT).unwrap();
        let run = ok(root.path(), &["train", "--corpus", s(&manifest), "--config", s(&cfg)]);
        (root, manifest, run)
    })
}

#[test]
fn synthetic_prepare_is_deterministic_and_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = ok(a.path(), &["prepare", "--synthetic", "--samples", "32", "--seed", "7"]);
    let db = ok(b.path(), &["prepare", "--synthetic", "--samples", "32", "--seed", "7"]);
    for f in ["corpus/manifest.jsonl", "stats.json", "corpus/frames/train.syn-0005.spft"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
    assert_eq!(da.file_name(), db.file_name());
    let again = ok(a.path(), &["prepare", "--synthetic", "--samples", "32", "--seed", "7"]);
    assert_eq!(again, da);
    let other = ok(a.path(), &["prepare", "--synthetic", "--samples", "32", "--seed", "8"]);
    assert_ne!(other, da);

    let manifest = json(&da.join("run.json"));
    assert_eq!(manifest["command"], "prepare");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    assert_eq!(json(&da.join("stats.json"))["num_samples"]["train"], 32);
}

#[test]
fn bad_manifest_fails_with_line_number() {
    let root = tempfile::tempdir().unwrap();
    let m = root.path().join("bad.manifest");
    fs::write(
        &m,
        "{\"id\":\"a\",\"num_frames\":4,\"translation\":\"x\",\"language\":\"en\"}\n{\"id\": oops}\n",
    )
    .unwrap();
    let out = slt(root.path(), &["prepare", s(&m)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn good_manifest_stats_count_splits() {
    let root = tempfile::tempdir().unwrap();
    let m = root.path().join("good.jsonl");
    let splits = ["train", "train", "valid", "test", "train", "test", "train"];
    let lines: String = splits
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            format!("{{\"id\":\"s{i}\",\"split\":\"{sp}\",\"num_frames\":{},\"translation\":\"w{i} x\",\"language\":\"en\"}}\n", 10 + i)
        })
        .collect();
    fs::write(&m, &lines).unwrap();
    let dir = ok(root.path(), &["prepare", s(&m)]);
    let stats = json(&dir.join("stats.json"));
    for sp in ["train", "valid", "test"] {
        let expected = lines.lines().filter(|l| l.contains(&format!("\"split\":\"{sp}\""))).count();
        assert_eq!(stats["num_samples"][sp], expected, "{sp}");
    }
    assert_eq!(stats["vocab_size"], 8);
}

#[test]
fn prepare_needs_exactly_one_source() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(slt(root.path(), &["prepare"]).status.code(), Some(1));
    assert_eq!(slt(root.path(), &["prepare", "x.jsonl", "--synthetic"]).status.code(), Some(1));
    assert_eq!(slt(root.path(), &["prepare", "--no-such-flag"]).status.code(), Some(1));
    assert!(!root.path().join("prepare").exists());
}

#[test]
fn zero_warmup_skips_alignment_phase() {
    let root = tempfile::tempdir().unwrap();
    let manifest = prepare_synthetic(root.path(), "8");
    let cfg = root.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = ok(
        root.path(),
        &["train", "--corpus", s(&manifest), "--config", s(&cfg), "--warmup-steps", "0"],
    );
    let trace = jsonl(&run.join("trace.jsonl"));
    assert_eq!(trace.len(), 10);
    assert!(trace.iter().all(|t| t["phase"] == "joint"));
    let report = json(&run.join("report.json"));
    assert_eq!(report["invariants_hold"], true);
    assert_eq!(report["lora_identity_at_joint_start"], true);
    assert!(run.join("checkpoints/joint-0000010/meta.json").exists());
    assert!(!run.join("checkpoints/warmup-0000000").exists());
    let effective: toml::Value = toml::from_str(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(effective["train"]["warmup_steps"].as_integer(), Some(0));
}

#[test]
fn resumed_training_reproduces_trace() {
    let root = tempfile::tempdir().unwrap();
    let manifest = prepare_synthetic(root.path(), "8");
    let cfg = root.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let full = ok(
        root.path(),
        &["train", "--corpus", s(&manifest), "--config", s(&cfg), "--checkpoint-every", "4"],
    );
    let ck = full.join("checkpoints/joint-0000004");
    assert!(ck.join("meta.json").exists());
    let resumed = ok(
        root.path(),
        &["train", "--corpus", s(&manifest), "--config", s(&cfg), "--checkpoint-every", "4", "--resume", s(&ck)],
    );
    assert_ne!(resumed, full);
    let tail: Vec<Value> = jsonl(&full.join("trace.jsonl"))
        .into_iter()
        .filter(|t| t["phase"] == "joint" && t["step"].as_u64().unwrap() >= 4)
        .collect();
    assert_eq!(jsonl(&resumed.join("trace.jsonl")), tail);
    let tensors = |run: &Path| {
        let dir = run.join("checkpoints/joint-0000010/tensors");
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (tensors(&full), tensors(&resumed));
    assert!(a.iter().any(|(n, _)| n.contains("lora")), "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(a, b);
}

#[test]
fn training_is_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let manifest = prepare_synthetic(root.path(), "8");
    let cfg = root.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let args = ["train", "--corpus", s(&manifest), "--config", s(&cfg), "--epochs", "7", "--warmup-steps", "3"];
    let a = ok(root.path(), &args);
    let before = fs::read(a.join("trace.jsonl")).unwrap();
    let b = ok(root.path(), &args);
    assert_eq!(a, b);
    assert_eq!(fs::read(b.join("trace.jsonl")).unwrap(), before);
}

#[test]
fn bad_config_is_a_validation_error() {
    let root = tempfile::tempdir().unwrap();
    let manifest = prepare_synthetic(root.path(), "4");
    let cfg = root.path().join("typo.toml");
    fs::write(&cfg, "[trian]\nepochs = 1\n").unwrap();
    let out = slt(root.path(), &["train", "--corpus", s(&manifest), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let out = slt(root.path(), &["train", "--corpus", s(&manifest), "--batch-size", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overfit_checkpoint_reproduces_references() {
    let (root, manifest, run) = overfit();
    let dir = ok(
        root.path(),
        &["translate", "--checkpoint", s(run), "--corpus", s(manifest), "--split", "train"],
    );
    let records = jsonl(&dir.join("hypotheses.jsonl"));
    assert_eq!(records.len(), 8);
    for r in &records {
        assert_eq!(r["hypothesis"], r["reference"], "{r}");
    }
    let ids: Vec<&str> = records.iter().map(|r| r["id"].as_str().unwrap()).collect();
    let corpus = load_manifest(manifest, &LoadOptions::default()).unwrap();
    let expected: Vec<&str> = corpus.samples().iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expected);

    let an = ok(root.path(), &["analyze", "--hypotheses", s(&dir.join("hypotheses.jsonl"))]);
    assert_eq!(json(&an.join("report.json"))["metrics"]["bleu4"], 100.0);
}

#[test]
fn beam_one_matches_greedy_default() {
    let (root, manifest, run) = overfit();
    let ck = run.join("checkpoints/warmup-0000100");
    let common = ["translate", "--checkpoint", s(&ck), "--corpus", s(manifest), "--split", "train"];
    let greedy = ok(root.path(), &common);
    let mut with_beam = common.to_vec();
    let elsewhere = root.path().join("beam-one");
    with_beam.extend(["--out", s(&elsewhere), "--beam", "1"]);
    let beam = ok(root.path(), &with_beam);
    assert_eq!(beam, elsewhere);
    assert_eq!(
        fs::read(greedy.join("hypotheses.jsonl")).unwrap(),
        fs::read(beam.join("hypotheses.jsonl")).unwrap()
    );
    with_beam.pop();
    with_beam.push("4");
    let wide = ok(root.path(), &with_beam);
    assert_eq!(jsonl(&wide.join("hypotheses.jsonl")).len(), 8);
}

#[test]
fn missing_checkpoint_fails() {
    let root = tempfile::tempdir().unwrap();
    let manifest = prepare_synthetic(root.path(), "4");
    let out = slt(
        root.path(),
        &["translate", "--checkpoint", s(&root.path().join("nope")), "--corpus", s(&manifest), "--split", "train"],
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (root, manifest, run) = overfit();
    let text = fs::read_to_string(manifest).unwrap();
    let first = text.lines().next().unwrap();
    let mut rec: Value = serde_json::from_str(first).unwrap();
    rec["translation"] = "zebra crossing".into();
    let odd = manifest.with_file_name("odd.jsonl");
    fs::write(&odd, text.replacen(first, &rec.to_string(), 1)).unwrap();
    let out = slt(
        root.path(),
        &["translate", "--checkpoint", s(run), "--corpus", s(&odd), "--split", "train"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zebra"));
}

#[test]
fn identical_files_score_full_bleu() {
    let root = tempfile::tempdir().unwrap();
    let f = root.path().join("a.txt");
    fs::write(&f, "the cat sat on the mat\nit is cold in the north today\n").unwrap();
    let dir = ok(root.path(), &["analyze", "--hypotheses", s(&f), "--references", s(&f)]);
    let report = json(&dir.join("report.json"));
    assert_eq!(report["metrics"]["bleu4"], 100.0);
    assert_eq!(report["metrics"]["rouge_l"], 100.0);
    assert_eq!(report["metrics"]["bleurt"], "n/a");
    assert!(report["metrics"]["signature"].as_str().unwrap().contains("tok:13a"));
    assert!(fs::read_to_string(dir.join("report.txt")).unwrap().contains("BLEU-4 100.00"));
}

#[test]
fn length_mismatch_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let h = root.path().join("h.txt");
    let r = root.path().join("r.txt");
    fs::write(&h, "a b\nc d\n").unwrap();
    fs::write(&r, "a b\n").unwrap();
    let out = slt(root.path(), &["analyze", "--hypotheses", s(&h), "--references", s(&r)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 hypotheses but 1 references"));
}

fn cluster(spread: f64, n: usize, d: usize, phase: f64) -> Vec<f64> {
    (0..n * d)
        .map(|i| 3.0 + spread * ((i as f64 * 12.9898 + phase).sin() * 43758.5453).fract())
        .collect()
}

#[test]
fn kde_entropy_orders_clusters_and_plots() {
    let root = tempfile::tempdir().unwrap();
    let tight = root.path().join("tight.spft");
    let loose = root.path().join("loose.spft");
    spft::write(&tight, &[60, 6], &cluster(0.1, 60, 6, 0.3), DType::F64).unwrap();
    spft::write(&loose, &[60, 6], &cluster(2.0, 60, 6, 0.3), DType::F64).unwrap();
    let dir = ok(root.path(), &["analyze", "--kde", s(&tight), "--kde", s(&loose), "--plot"]);
    let report = json(&dir.join("report.json"));
    let kde = report["kde"].as_array().unwrap();
    assert_eq!(kde.len(), 2);
    let (ht, hl) = (kde[0]["entropy"].as_f64().unwrap(), kde[1]["entropy"].as_f64().unwrap());
    assert!(ht < hl, "tight {ht} loose {hl}");
    // The loose cloud is the tight one scaled by c = 20 about its centre, so
    // with Scott's bandwidth every density drops by c^2 in two dimensions:
    // H' = (H + 2 ln c * S) / c^2, where S is the tight cloud's density sum.
    let mass = kde[0]["density_sum"].as_f64().unwrap();
    let c2 = 400.0;
    assert!((hl - (ht + 20f64.ln() * 2.0 * mass) / c2).abs() < 1e-9 * ht.abs().max(1.0), "{ht} {hl} {mass}");
    for f in ["kde-0.png", "kde-1.png"] {
        let bytes = fs::read(dir.join(f)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
    assert!(report["metrics"].is_null());
}

#[test]
fn visual_tokens_are_brute_force_nearest_words() {
    let (root, manifest, run) = overfit();
    let dir = ok(
        root.path(),
        &["analyze", "--visual-tokens", "--checkpoint", s(run), "--corpus", s(manifest), "--split", "train"],
    );
    let rows = jsonl(&dir.join("visual_tokens.jsonl"));
    assert_eq!(rows.len(), 8);

    let ck_dir = run.join("checkpoints/joint-0001500");
    let pipe = Checkpoint::load(&ck_dir).unwrap().into_pipeline().unwrap();
    let corpus = load_manifest(manifest, &LoadOptions::default()).unwrap().split(Split::Train);
    let examples = pipe.prepare(&corpus).unwrap();
    let table = &pipe.model.table.weights;
    for (row, ex) in rows.iter().zip(&examples) {
        assert_eq!(row["id"], ex.id.as_str());
        let z = pipe.sign_feature(ex).unwrap();
        let tokens = row["tokens"].as_array().unwrap();
        assert_eq!(tokens.len(), z.nrows());
        for (t, feat) in tokens.iter().zip(z.rows()) {
            let dists: Vec<f64> = table
                .rows()
                .into_iter()
                .map(|e| feat.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(t["id"].as_u64().unwrap() as usize, first);
            assert_eq!(t["word"], pipe.model.vocab().token(first).unwrap());
        }
        let words: Vec<&str> = tokens.iter().map(|t| t["word"].as_str().unwrap()).collect();
        let mut dedup: Vec<&str> = words.clone();
        dedup.dedup();
        assert_eq!(row["deduplicated"], serde_json::json!(dedup));
    }
}
