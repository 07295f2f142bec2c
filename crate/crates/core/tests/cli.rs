use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "context_len": 32, "vocab_size": 128},
  "train": {"batch_size": 2, "context_len": 32, "max_steps": 6, "eval_interval": 2},
  "eval": {"n_new": 40, "trials": 3, "coherence_lengths": [32, 40]}
}"#;

fn corpus() -> String {
    format!("train.corpus_path={}/data/alice29.txt", env!("CARGO_MANIFEST_DIR"))
}

fn cflux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cflux")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.json");
    fs::write(&config, SMALL).unwrap();
    Fixture { _dir: dir, root, config }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let corpus = corpus();
    let mut args = vec!["train", "--config", s(&f.config), "--set", &corpus, "--out", s(&out)];
    args.extend(extra);
    let o = cflux(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let f = fixture();
    let a = train(&f, "a", &["--set", "flux.alpha=0"]);
    let b = train(&f, "b", &["--set", "flux.alpha=0"]);
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,entropy_H,grad_norm\n"));
    assert_eq!(log.lines().count(), 1 + 4);
    assert_eq!(fs::read(a.join("model.cflx")).unwrap(), fs::read(b.join("model.cflx")).unwrap());
    assert_eq!(log, fs::read_to_string(b.join("train_log.csv")).unwrap());
    let resolved: serde_json::Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["flux"]["alpha"], 0.0);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let f = fixture();
    let o = cflux(&["train", "--config", s(&f.config), "--set", "flux.gamma=3", "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flux.gamma"));
    let o = cflux(&["train", "--set", "train.beta1=1.5", "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = cflux(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_prints_bytes_and_writes_entropies() {
    let f = fixture();
    let run = train(&f, "m", &[]);
    let ckpt = run.join("model.cflx");
    let gen = |seed: &str, out: &str| {
        cflux(&["generate", "--checkpoint", s(&ckpt), "--prompt", "Alice", "--n", "25", "--seed", seed, "--out", s(&f.root.join(out))])
    };
    let a = gen("4", "g1");
    let b = gen("4", "g2");
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let csv = fs::read_to_string(f.root.join("g1/entropies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 25);
    assert_eq!(fs::read(f.root.join("g1/generated.bin")).unwrap().len(), 25);

    let bad = cflux(&["generate", "--checkpoint", s(&f.config), "--prompt", "x", "--out", s(&f.root.join("g3"))]);
    assert_eq!(bad.status.code(), Some(3));
    let missing = cflux(&["generate", "--checkpoint", s(&f.root.join("nope.cflx")), "--prompt", "x"]);
    assert_eq!(missing.status.code(), Some(3));
    // byte 0xC3 is outside the 128-symbol vocabulary
    let outside = cflux(&["eval", "--checkpoint", s(&ckpt), "--config", s(&f.config), "--prompt", "é", "--out", s(&f.root.join("e"))]);
    assert_eq!(outside.status.code(), Some(4));
}

#[test]
fn eval_and_compare_manifests() {
    let f = fixture();
    let base = train(&f, "base", &["--set", "flux.alpha=0", "--set", "flux.beta=0", "--set", "flux.gate_enabled=false"]);
    let flux = train(&f, "flux", &[]);
    let prompts = f.root.join("prompts.txt");
    fs::write(&prompts, "Alice was\n\nThe Queen\n").unwrap();

    let eval = |out: &str| {
        cflux(&["eval", "--checkpoint", s(&flux.join("model.cflx")), "--config", s(&f.config), "--prompts", s(&prompts), "--out", s(&f.root.join(out))])
    };
    assert_eq!(eval("e1").status.code(), Some(0));
    assert_eq!(eval("e2").status.code(), Some(0));
    for file in ["report.json", "ngrams.csv", "entropy_series.csv", "trajectory.csv", "similarity.csv", "coherence.csv"] {
        let a = fs::read(f.root.join("e1").join(file)).unwrap();
        assert_eq!(a, fs::read(f.root.join("e2").join(file)).unwrap(), "{file}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.root.join("e1/report.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["prompts"].as_array().unwrap().len(), 2);
    assert_eq!(report["entropy_series"].as_array().unwrap().len(), 40);

    let cmp = |a: &Path, b: &Path, out: &str| {
        cflux(&["compare", "--baseline", s(&a.join("model.cflx")), "--flux", s(&b.join("model.cflx")), "--config", s(&f.config), "--prompts", s(&prompts), "--trials", "4", "--out", s(&f.root.join(out))])
    };
    let same = cmp(&flux, &flux, "same");
    assert_eq!(same.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(f.root.join("same/comparison.json")).unwrap()).unwrap();
    assert!(doc["deltas"].as_object().unwrap().values().all(|v| v.as_f64() == Some(0.0)));

    assert_eq!(cmp(&base, &flux, "diff").status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(f.root.join("diff/comparison.json")).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(f.root.join("diff/ngrams.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), ["2-gram", "3-gram", "4-gram"]);
    for (row, n) in rows.iter().zip(["2", "3", "4"]) {
        let base: f64 = row[1].parse().unwrap();
        let flux: f64 = row[2].parse().unwrap();
        assert_eq!(base, doc["baseline"]["repeated_ngrams"][n].as_f64().unwrap());
        assert_eq!(flux, doc["flux"]["repeated_ngrams"][n].as_f64().unwrap());
    }
    let mut rdr = csv::Reader::from_path(f.root.join("diff/similarity.csv")).unwrap();
    assert_eq!(rdr.records().count(), 4);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = cflux(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    let bad = cflux(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("corrupted_rule"));
}
