//! The operations behind each command-line subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, load_sentences, parse_conll, parse_tagged, split, LabelSet, Sentence, TaggedSentence, Vocabularies,
};
use crate::dataset::FragmentDataset;
use crate::encoding::{uniqueness_check, Alpha, Encoder, FofeCode, Vocabulary, DEFAULT_ENUMERATION_BUDGET};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_spans, EvalReport};
use crate::fragments::Relation;
use crate::inference::{decode_corpus, to_tagged, DecodeConfig};
use crate::network::{gradcheck_suite, load_model, save_model, train, EpochLog, GradcheckOptions, Model, MODEL_FILE};
use crate::util::write_atomic;

pub const TRAIN_LOG_FILE: &str = "train.log";

pub struct Corpora {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

/// Reads the training corpus and either the given dev / test files or a
/// document-level split of the training corpus.
pub fn load_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let train_path = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Usage("a training corpus is required (--train)".into()))?;
    let mut train = load_sentences(train_path, &cfg.labels)?;
    let load = |p: &Option<PathBuf>| -> Result<Vec<Sentence>> {
        p.as_ref().map_or(Ok(Vec::new()), |p| load_sentences(p, &cfg.labels))
    };
    let mut dev = load(&cfg.dev)?;
    let mut test = load(&cfg.test)?;
    if let (Some(ratios), None, None) = (cfg.split, &cfg.dev, &cfg.test) {
        let (a, b, c) = split(&train, ratios, cfg.split_seed).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::Usage(m),
            other => other,
        })?;
        (train, dev, test) = (a, b, c);
    }
    if train.is_empty() {
        return Err(Error::NoData(format!("{} holds no sentences", train_path.display())));
    }
    Ok(Corpora { train, dev, test })
}

/// Decodes `sentences` and scores them against their gold spans.
pub fn score_corpus(
    model: &Model,
    sentences: &[Sentence],
    vocabs: &Vocabularies,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<EvalReport> {
    let predictions = decode_corpus(model, sentences, vocabs, decode, threads)?;
    let pred: Vec<_> = predictions
        .iter()
        .map(|p| p.iter().map(|x| x.entity()).collect())
        .collect();
    let gold: Vec<_> = sentences.iter().map(|s| s.gold.clone()).collect();
    evaluate_spans(&pred, &gold, &model.labels, Some(decode.max_span))
}

pub struct TrainOutcome {
    pub model: Model,
    pub vocabs: Vocabularies,
    pub logs: Vec<EpochLog>,
    pub test_report: Option<EvalReport>,
}

/// Builds vocabularies and a fresh model from the configuration and trains it.
/// Writes nothing.
pub fn train_model(cfg: &RunConfig, corpora: &Corpora) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocabs = build_vocab(&corpora.train, cfg.min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
    let mut model = Model::new(
        cfg.labels.clone(),
        cfg.features.clone(),
        &vocabs,
        &cfg.hidden,
        cfg.activation,
        &mut rng,
    )?;
    for (path, table, vocab, fold) in [
        (&cfg.pretrained_cased, &mut model.embeddings.cased, &vocabs.cased, false),
        (&cfg.pretrained_uncased, &mut model.embeddings.uncased, &vocabs.uncased, true),
    ] {
        if let Some(p) = path {
            let n = table.load_pretrained(p, vocab, fold)?;
            info!("initialized {n} of {} rows from {}", vocab.len(), p.display());
        }
    }
    if cfg.freeze_embeddings {
        model.embeddings.cased.trainable = false;
        model.embeddings.uncased.trainable = false;
    }

    let data = FragmentDataset::new(
        &corpora.train,
        &vocabs,
        &cfg.features,
        &cfg.labels,
        cfg.max_span,
        cfg.sampling,
    )?;
    info!(
        "{} training sentences: {} exact, {} partial, {} disjoint fragments",
        corpora.train.len(),
        data.count(Relation::Exact),
        data.count(Relation::Partial),
        data.count(Relation::Disjoint)
    );
    let logs = train(&mut model, &data, &cfg.schedule, |m, _| {
        if corpora.dev.is_empty() {
            return Ok(None);
        }
        Ok(Some(score_corpus(m, &corpora.dev, &vocabs, &cfg.decode, cfg.threads)?.overall.f1))
    })?;
    let test_report = if corpora.test.is_empty() {
        None
    } else {
        Some(score_corpus(&model, &corpora.test, &vocabs, &cfg.decode, cfg.threads)?)
    };
    Ok(TrainOutcome {
        model,
        vocabs,
        logs,
        test_report,
    })
}

pub fn format_train_log(cfg: &RunConfig, outcome: &TrainOutcome) -> String {
    let mut out = String::new();
    for line in cfg.to_kv().lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "epoch\tloss\tlr\tdropout\texamples\tdev_f1");
    for l in &outcome.logs {
        let dev = l.dev_f1.map(|f| format!("{f:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{}\t{:.8}\t{:.8}\t{:.4}\t{}\t{dev}",
            l.epoch, l.loss, l.lr, l.dropout, l.examples
        );
    }
    if let Some(r) = &outcome.test_report {
        let _ = writeln!(out, "\n# test set");
        for line in r.to_table().lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out
}

/// Trains and writes `model.bin`, the three vocabularies and `train.log` into
/// `output_dir`. Inputs are read and validated before anything is written.
pub fn cmd_train(cfg: &RunConfig, output_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpora = load_corpora(cfg)?;
    let outcome = train_model(cfg, &corpora)?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    for (name, vocab) in [
        (Vocabularies::CASED_FILE, &outcome.vocabs.cased),
        (Vocabularies::UNCASED_FILE, &outcome.vocabs.uncased),
        (Vocabularies::CHARS_FILE, &outcome.vocabs.chars),
    ] {
        write_atomic(&output_dir.join(name), vocab.to_text().as_bytes())?;
    }
    write_atomic(
        &output_dir.join(TRAIN_LOG_FILE),
        format_train_log(cfg, &outcome).as_bytes(),
    )?;
    save_model(&outcome.model, &output_dir.join(MODEL_FILE))?;
    Ok(outcome)
}

/// Loads `model.bin` and the vocabularies beside it, checking that they belong
/// together.
pub fn load_model_dir(dir: &Path) -> Result<(Model, Vocabularies)> {
    let model = load_model(&dir.join(MODEL_FILE))?;
    let vocabs = Vocabularies::read_dir(dir)?;
    model.check_vocabularies(&vocabs)?;
    Ok((model, vocabs))
}

/// Reads sentences to tag. JSON-lines input keeps its doc ids and ignores any
/// spans; column input may carry tags of the model's types.
pub fn read_input(path: &Path, labels: &LabelSet) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if text.trim_start().starts_with('{') {
        parse_tagged(&text, &source)?
            .into_iter()
            .map(|r| Sentence::new(r.doc_id, r.tokens, Vec::new()))
            .collect()
    } else {
        let (sentences, warnings) = parse_conll(&text, labels, &source)?;
        for w in warnings {
            warn!("{}: {}", w.location, w.message);
        }
        Ok(sentences)
    }
}

pub fn cmd_tag(model_dir: &Path, input: &Path, decode: &DecodeConfig, threads: usize) -> Result<Vec<TaggedSentence>> {
    decode.validate()?;
    let (model, vocabs) = load_model_dir(model_dir)?;
    let sentences = read_input(input, &model.labels)?;
    let predictions = decode_corpus(&model, &sentences, &vocabs, decode, threads)?;
    Ok(to_tagged(&sentences, &predictions))
}

fn read_records(path: &Path, labels: &LabelSet) -> Result<Vec<TaggedSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if text.trim_start().starts_with('{') {
        parse_tagged(&text, &source)
    } else {
        let (sentences, _) = parse_conll(&text, labels, &source)?;
        Ok(sentences.iter().enumerate().map(|(i, s)| s.to_tagged(i)).collect())
    }
}

/// Scores a prediction file against a gold file; either may be JSON lines or
/// column format.
pub fn cmd_eval(predictions: &Path, gold: &Path, labels: &LabelSet, max_span: Option<usize>) -> Result<EvalReport> {
    let pred = read_records(predictions, labels)?;
    let gold = read_records(gold, labels)?;
    evaluate(&pred, &gold, labels, max_span)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Uniqueness,
    Gradcheck,
    All,
}

impl OracleKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "uniqueness" => Ok(OracleKind::Uniqueness),
            "gradcheck" => Ok(OracleKind::Gradcheck),
            "all" => Ok(OracleKind::All),
            _ => Err(Error::Usage(format!("unknown oracle {name:?} (uniqueness, gradcheck, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleParams {
    pub vocab_size: usize,
    pub max_len: usize,
    pub alphas: Vec<f64>,
    pub tolerance: f64,
    pub budget: u128,
    pub seed: u64,
    pub corrupt_gradient: bool,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            vocab_size: 3,
            max_len: 8,
            alphas: vec![0.25, 0.5],
            tolerance: 1e-9,
            budget: DEFAULT_ENUMERATION_BUDGET,
            seed: 7,
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleReport {
    /// One `(description, passed)` pair per check.
    pub checks: Vec<(String, bool)>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (line, ok) in &self.checks {
            let _ = writeln!(out, "{} {line}", if *ok { "PASS" } else { "FAIL" });
        }
        out
    }
}

pub fn cmd_oracle(kind: OracleKind, params: &OracleParams) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    if matches!(kind, OracleKind::Uniqueness | OracleKind::All) {
        for &alpha in &params.alphas {
            let r = uniqueness_check(params.vocab_size, params.max_len, alpha, params.tolerance, params.budget)
                .map_err(|e| match e {
                    Error::InvalidParameter(m) => Error::Usage(m),
                    other => other,
                })?;
            let mut line = format!(
                "uniqueness V={} L={} alpha={alpha} tol={:e}: {} sequences, {} colliding pairs",
                params.vocab_size, params.max_len, params.tolerance, r.sequences, r.colliding_pairs
            );
            if let Some((a, b)) = &r.example {
                let _ = write!(line, " (e.g. {a:?} vs {b:?})");
            }
            report.checks.push((line, r.is_unique()));
        }
    }
    if matches!(kind, OracleKind::Gradcheck | OracleKind::All) {
        let opts = GradcheckOptions {
            corrupt: params.corrupt_gradient,
            ..GradcheckOptions::default()
        };
        for r in gradcheck_suite(params.seed, opts)? {
            report.checks.push((
                format!(
                    "gradcheck {}: {} parameters, max relative error {:.3e} at {}",
                    r.name, r.checked, r.max_rel_error, r.worst
                ),
                r.passed,
            ));
        }
    }
    Ok(report)
}

/// FOFE code of `tokens`. Without a vocabulary, one is built from the tokens in
/// order of first appearance.
pub fn cmd_encode(tokens: &[String], alpha: f64, vocab: Option<Vocabulary>) -> Result<(Vocabulary, FofeCode)> {
    let alpha = Alpha::new(alpha).map_err(|e| Error::Usage(e.to_string()))?;
    let vocab = vocab.unwrap_or_else(|| Vocabulary::with_unk(tokens.iter().map(String::as_str)));
    let code = Encoder::from_alpha(alpha).encode(tokens, &vocab);
    Ok((vocab, code))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_inspection() {
        let tokens: Vec<String> = "A B C B C".split(' ').map(String::from).collect();
        let (vocab, code) = cmd_encode(&tokens, 0.5, None).unwrap();
        assert_eq!(vocab.symbols()[..3], ["A", "B", "C"]);
        assert_eq!(code.to_dense()[..3], [0.0625, 0.625, 1.25]);
        assert!(cmd_encode(&tokens, 1.0, None).is_err());
    }

    #[test]
    fn default_oracles_pass_and_corruption_fails() {
        let ok = cmd_oracle(OracleKind::All, &OracleParams::default()).unwrap();
        assert!(ok.passed(), "{}", ok.render());
        let bad = cmd_oracle(
            OracleKind::Gradcheck,
            &OracleParams {
                corrupt_gradient: true,
                ..OracleParams::default()
            },
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
