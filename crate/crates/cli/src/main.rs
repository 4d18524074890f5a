use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fofe_ner::commands::{self, OracleKind, OracleParams};
use fofe_ner::config::{read_kv, RunConfig};
use fofe_ner::corpus::{write_conll, write_tagged, LabelSet};
use fofe_ner::encoding::Vocabulary;
use fofe_ner::inference::{DecodeConfig, Strategy};
use fofe_ner::synthetic::{self, SyntheticConfig};
use fofe_ner::{Error, Result};

/// FOFE-based local-detection named-entity recognizer.
#[derive(Parser)]
#[command(name = "fofe-ner", version)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it, its vocabularies and a training log.
    Train(Box<TrainArgs>),
    /// Tag sentences with a trained model, writing JSON lines.
    Tag(TagArgs),
    /// Score predictions against gold annotations.
    Eval(EvalArgs),
    /// Run the encoding-uniqueness and gradient-check oracles.
    Oracle(OracleArgs),
    /// Print the FOFE code of a token sequence.
    Encode(EncodeArgs),
    /// Write a small generated corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Default settings: conll or kbp.
    #[arg(long)]
    profile: Option<String>,
    /// Training corpus (CoNLL columns or JSON lines).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Document-level train:dev:test ratios applied to the training corpus.
    #[arg(long)]
    split: Option<String>,
    /// Directory for model.bin, the vocabularies and train.log.
    #[arg(long)]
    output_dir: PathBuf,
    /// Comma-separated entity types.
    #[arg(long)]
    labels: Option<String>,
    /// Feature preset or block list, e.g. `all` or `cased.bow,char.cnn`.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    dropout_initial: Option<String>,
    #[arg(long)]
    dropout_final: Option<String>,
    /// Comma-separated hidden layer sizes.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    word_dim: Option<String>,
    #[arg(long)]
    char_dim: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Producer threads feeding the trainer; more than one may reorder batches.
    #[arg(long)]
    producers: Option<String>,
    #[arg(long)]
    max_span: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    /// Any other setting, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn flags(&self) -> Result<Vec<(String, String)>> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let named = [
            ("profile", self.profile.clone()),
            ("train", path(&self.train)),
            ("dev", path(&self.dev)),
            ("test", path(&self.test)),
            ("split", self.split.clone()),
            ("labels", self.labels.clone()),
            ("features", self.features.clone()),
            ("epochs", self.epochs.clone()),
            ("lr", self.lr.clone()),
            ("batch_size", self.batch_size.clone()),
            ("dropout_initial", self.dropout_initial.clone()),
            ("dropout_final", self.dropout_final.clone()),
            ("hidden", self.hidden.clone()),
            ("word_dim", self.word_dim.clone()),
            ("char_dim", self.char_dim.clone()),
            ("seed", self.seed.clone()),
            ("producers", self.producers.clone()),
            ("max_span", self.max_span.clone()),
            ("threads", self.threads.clone()),
        ];
        let mut out: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        out.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(out)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    HighestFirst,
    LongestFirst,
}

#[derive(Args)]
struct TagArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model_dir: PathBuf,
    /// Sentences to tag (CoNLL columns, one token per line, or JSON lines).
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Minimum winning-class probability (exclusive).
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "highest-first")]
    strategy: StrategyArg,
    /// Also emit entities nested inside kept entities.
    #[arg(long)]
    nested: bool,
    #[arg(long, default_value_t = 7)]
    max_depth: usize,
    #[arg(long, default_value_t = 7)]
    max_span: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Comma-separated entity types.
    #[arg(long, default_value = "PER,LOC,ORG,MISC")]
    labels: String,
    /// Report gold spans longer than this as unreachable.
    #[arg(long)]
    max_span: Option<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// uniqueness, gradcheck or all.
    #[arg(default_value = "all")]
    kind: String,
    #[arg(long, default_value_t = 3)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Forgetting factors to check (repeatable).
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Largest number of sequences to enumerate.
    #[arg(long, default_value_t = 1_000_000)]
    budget: u128,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Perturb one analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct EncodeArgs {
    /// Tokens, or characters with --chars.
    #[arg(required = true)]
    tokens: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Encode the characters of the (space-joined) input instead of its tokens.
    #[arg(long)]
    chars: bool,
    /// Vocabulary file; built from the input when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Conll,
    Jsonl,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 40)]
    sentences: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "conll")]
    format: Format,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let file = match &args.config {
                Some(p) => read_kv(p)?,
                None => Vec::new(),
            };
            let cfg = RunConfig::resolve(&file, &args.flags()?)?;
            let outcome = commands::cmd_train(&cfg, &args.output_dir)?;
            let last = outcome.logs.last().expect("at least one epoch");
            info!(
                "trained {} epochs, final loss {:.6}; wrote {}",
                outcome.logs.len(),
                last.loss,
                args.output_dir.display()
            );
            if let Some(r) = &outcome.test_report {
                print!("{}", r.to_table());
            }
        }
        Command::Tag(args) => {
            let decode = DecodeConfig {
                threshold: args.threshold,
                strategy: match args.strategy {
                    StrategyArg::HighestFirst => Strategy::HighestFirst,
                    StrategyArg::LongestFirst => Strategy::LongestFirst,
                },
                nested: args.nested,
                max_depth: args.max_depth,
                max_span: args.max_span,
            };
            let records = commands::cmd_tag(&args.model_dir, &args.input, &decode, args.threads)?;
            write_output(args.output.as_deref(), &write_tagged(&records))?;
        }
        Command::Eval(args) => {
            let labels = LabelSet::parse(&args.labels).map_err(|e| Error::Usage(e.to_string()))?;
            let report = commands::cmd_eval(&args.predictions, &args.gold, &labels, args.max_span)?;
            if args.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Oracle(args) => {
            let params = OracleParams {
                vocab_size: args.vocab_size,
                max_len: args.max_len,
                alphas: if args.alphas.is_empty() {
                    OracleParams::default().alphas
                } else {
                    args.alphas
                },
                tolerance: args.tol,
                budget: args.budget,
                seed: args.seed,
                corrupt_gradient: args.corrupt_gradient,
            };
            let report = commands::cmd_oracle(OracleKind::parse(&args.kind)?, &params)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Encode(args) => {
            let tokens: Vec<String> = if args.chars {
                args.tokens.join(" ").chars().map(String::from).collect()
            } else {
                args.tokens
            };
            let vocab = args.vocab.as_ref().map(Vocabulary::read).transpose()?;
            let (vocab, code) = commands::cmd_encode(&tokens, args.alpha, vocab)?;
            for &(id, w) in code.entries() {
                println!("{id}\t{}\t{w}", vocab.symbol_at(id).unwrap_or("?"));
            }
        }
        Command::Synth(args) => {
            let sentences = synthetic::generate(&SyntheticConfig {
                sentences: args.sentences,
                seed: args.seed,
                ..SyntheticConfig::default()
            });
            let text = match args.format {
                Format::Conll => write_conll(&sentences)?,
                Format::Jsonl => write_tagged(
                    &sentences
                        .iter()
                        .enumerate()
                        .map(|(i, s)| s.to_tagged(i))
                        .collect::<Vec<_>>(),
                ),
            };
            write_output(Some(&args.output), &text)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .parse_env("FOFE_NER_LOG")
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
