use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fofe-ner"));
    cmd.arg("--quiet");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DESK: &[&str] = &[
    "--labels", "PER,LOC,ORG",
    "--features", "all",
    "--word-dim", "32",
    "--char-dim", "16",
    "--hidden", "64,64",
    "--batch-size", "32",
    "--dropout-initial", "0",
    "--dropout-final", "0",
    "--seed", "1",
    "--set", "cnn_heights=2,3",
    "--set", "cnn_kernels=8",
    "--set", "negative_ratio=1e9",
];

fn train(dir: &Path, corpus: &Path, epochs: &str) -> Output {
    let mut args = vec!["train", "--train", s(corpus), "--output-dir", s(dir), "--epochs", epochs];
    args.extend_from_slice(DESK);
    run(&args)
}

struct Trained {
    _root: tempfile::TempDir,
    corpus: PathBuf,
    model: PathBuf,
}

/// One overfit model shared by the tests below.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let corpus = root.path().join("train.conll");
        let out = run(&["synth", "--output", s(&corpus), "--sentences", "40", "--seed", "1"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let model = root.path().join("model");
        let out = train(&model, &corpus, "200");
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Trained {
            _root: root,
            corpus,
            model,
        }
    })
}

fn tag(model: &Path, input: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["tag", "--model-dir", s(model), "--input", s(input)];
    args.extend_from_slice(extra);
    run(&args)
}

fn spans(jsonl: &str) -> Vec<Vec<(u64, u64, String)>> {
    jsonl
        .lines()
        .map(|line| {
            let v: Value = serde_json::from_str(line).unwrap();
            v["spans"]
                .as_array()
                .unwrap()
                .iter()
                .map(|sp| {
                    (
                        sp["start"].as_u64().unwrap(),
                        sp["end"].as_u64().unwrap(),
                        sp["label"].as_str().unwrap().to_string(),
                    )
                })
                .collect()
        })
        .collect()
}

fn eval_json(pred: &Path, gold: &Path) -> Value {
    let out = run(&["eval", "--predictions", s(pred), "--gold", s(gold), "--labels", "PER,LOC,ORG", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    serde_json::from_str(&stdout(&out)).unwrap()
}

#[test]
fn tagging_training_data_reproduces_gold() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    let out = tag(&t.model, &t.corpus, &["--output", s(&pred)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = eval_json(&pred, &t.corpus);
    assert_eq!(report["overall"]["f1"].as_f64().unwrap(), 1.0, "{report}");
}

#[test]
fn empty_input_gives_empty_output() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = tag(&t.model, &empty, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "");
}

#[test]
fn higher_threshold_keeps_a_subset() {
    let t = trained();
    let loose = spans(&stdout(&tag(&t.model, &t.corpus, &["--threshold", "0.5"])));
    let strict = spans(&stdout(&tag(&t.model, &t.corpus, &["--threshold", "0.99"])));
    assert_eq!(loose.len(), strict.len());
    for (l, s) in loose.iter().zip(&strict) {
        assert!(s.iter().all(|x| l.contains(x)), "{s:?} not within {l:?}");
    }
}

#[test]
fn tagging_runs_with_every_decoding_option() {
    let t = trained();
    for extra in [
        &["--strategy", "longest-first"][..],
        &["--nested", "--max-depth", "2"][..],
        &["--threads", "3"][..],
    ] {
        let out = tag(&t.model, &t.corpus, extra);
        assert_eq!(code(&out), 0, "{extra:?}: {}", stderr(&out));
        assert_eq!(stdout(&out).lines().count(), 40);
    }
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir.path().join("model"), &dir.path().join("absent.conll"), "1");
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.path().join("model").join("model.bin").exists());
}

#[test]
fn dev_file_and_split_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.conll");
    std::fs::write(&corpus, "Oslo B-LOC\n").unwrap();
    let out = run(&[
        "train", "--train", s(&corpus), "--dev", s(&corpus), "--split", "8:1:1",
        "--output-dir", s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("--dev") && err.contains("--split"), "{err}");
}

#[test]
fn unknown_argument_is_a_usage_error() {
    assert_eq!(code(&run(&["tag", "--bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

const GOLD: &str = "\
Ada B-PER
Lovelace I-PER
visited O
Paris B-LOC

the O
Acme B-ORG
board O
";

const PRED: &str = "\
Ada B-PER
Lovelace I-PER
visited O
Paris B-ORG

the B-PER
Acme B-ORG
board O
";

const DISJOINT: &str = "\
Ada O
Lovelace O
visited B-PER
Paris O

the O
Acme O
board B-LOC
";

#[test]
fn eval_identical_disjoint_and_hand_scored() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.conll");
    let pred = dir.path().join("pred.conll");
    let none = dir.path().join("none.conll");
    std::fs::write(&gold, GOLD).unwrap();
    std::fs::write(&pred, PRED).unwrap();
    std::fs::write(&none, DISJOINT).unwrap();

    assert_eq!(eval_json(&gold, &gold)["overall"]["f1"].as_f64().unwrap(), 1.0);
    assert_eq!(eval_json(&none, &gold)["overall"]["f1"].as_f64().unwrap(), 0.0);

    // tp: Ada Lovelace PER, Acme ORG; fp: Paris ORG, the PER; fn: Paris LOC
    let r = eval_json(&pred, &gold);
    let overall = &r["overall"];
    assert_eq!(overall["tp"], 2);
    assert_eq!(overall["fp"], 2);
    assert_eq!(overall["fn"], 1);
    assert!((overall["precision"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((overall["recall"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((overall["f1"].as_f64().unwrap() - 4.0 / 7.0).abs() < 1e-12);

    let table = stdout(&run(&["eval", "--predictions", s(&pred), "--gold", s(&gold), "--labels", "PER,LOC,ORG"]));
    assert!(table.contains("PER") && table.contains("LOC") && table.contains("ORG"), "{table}");
}

#[test]
fn oracle_passes_and_fails_when_corrupted() {
    let out = run(&["oracle"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).lines().all(|l| l.starts_with("PASS")));

    let out = run(&["oracle", "uniqueness", "--alpha", "0.25"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));

    let out = run(&["oracle", "gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let other_corpus = dir.path().join("other.conll");
    let out = run(&["synth", "--output", s(&other_corpus), "--sentences", "10", "--seed", "5"]);
    assert_eq!(code(&out), 0);
    let other = dir.path().join("other");
    assert_eq!(code(&train(&other, &other_corpus, "1")), 0);

    let mixed = dir.path().join("mixed");
    std::fs::create_dir(&mixed).unwrap();
    for entry in std::fs::read_dir(&t.model).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, mixed.join(path.file_name().unwrap())).unwrap();
    }
    for entry in std::fs::read_dir(&other).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap().to_string_lossy().ends_with(".vocab") {
            std::fs::copy(&path, mixed.join(path.file_name().unwrap())).unwrap();
        }
    }
    let out = tag(&mixed, &t.corpus, &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.conll");
    assert_eq!(code(&run(&["synth", "--output", s(&corpus), "--sentences", "12"])), 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&train(&a, &corpus, "3")), 0);
    assert_eq!(code(&train(&b, &corpus, "3")), 0);
    for name in ["model.bin", "train.log"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn encode_prints_weights() {
    let out = run(&["encode", "--alpha", "0.5", "A", "B", "C", "B", "C"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "0\tA\t0.0625\n1\tB\t0.625\n2\tC\t1.25\n");
    let out = run(&["encode", "--alpha", "1.5", "A"]);
    assert_eq!(code(&out), 1);
}
