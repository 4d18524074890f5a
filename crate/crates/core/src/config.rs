//! Run configuration: profile defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::LabelSet;
use crate::encoding::Alpha;
use crate::error::{Error, Result};
use crate::features::{CnnConfig, FeatureConfig, FeatureSelection};
use crate::fragments::{SamplingConfig, DEFAULT_MAX_SPAN};
use crate::inference::{DecodeConfig, Strategy};
use crate::network::{Activation, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Conll,
    Kbp,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "conll" => Ok(Profile::Conll),
            "kbp" => Ok(Profile::Kbp),
            _ => Err(Error::Usage(format!("unknown profile {name:?} (conll, kbp)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Conll => "conll",
            Profile::Kbp => "kbp",
        }
    }
}

/// Where a setting came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Train / dev / test ratios for carving a single corpus by document.
    pub split: Option<[f64; 3]>,
    pub split_seed: u64,
    pub labels: LabelSet,
    pub min_count: usize,
    pub features: FeatureConfig,
    pub pretrained_cased: Option<PathBuf>,
    pub pretrained_uncased: Option<PathBuf>,
    pub freeze_embeddings: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub schedule: TrainSchedule,
    pub sampling: SamplingConfig,
    pub max_span: usize,
    pub decode: DecodeConfig,
    /// Decoding threads.
    pub threads: usize,
    explicit: BTreeMap<String, Source>,
}

/// Every recognised key, in the order `to_kv` writes them.
pub const KEYS: &[&str] = &[
    "profile",
    "train",
    "dev",
    "test",
    "split",
    "split_seed",
    "labels",
    "min_count",
    "features",
    "word_dim",
    "char_dim",
    "word_alpha",
    "char_alpha",
    "cnn_heights",
    "cnn_kernels",
    "cnn_activation",
    "pretrained_cased",
    "pretrained_uncased",
    "freeze_embeddings",
    "hidden",
    "activation",
    "epochs",
    "lr",
    "lr_final_fraction",
    "dropout_initial",
    "dropout_final",
    "input_dropout",
    "batch_size",
    "seed",
    "producers",
    "queue_capacity",
    "max_span",
    "negative_ratio",
    "min_negatives",
    "threshold",
    "strategy",
    "nested",
    "max_depth",
    "threads",
];

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (epochs, word_dim, labels, split) = match profile {
            Profile::Conll => (128, 256, LabelSet::conll(), None),
            Profile::Kbp => (
                256,
                128,
                LabelSet::new(["PER", "ORG", "GPE", "LOC", "FAC"]).expect("static label set"),
                Some([0.90, 0.05, 0.05]),
            ),
        };
        Self {
            profile,
            train: None,
            dev: None,
            test: None,
            split,
            split_seed: 1,
            labels,
            min_count: 1,
            features: FeatureConfig {
                selection: FeatureSelection::all(),
                word_dim,
                char_dim: 64,
                word_alpha: Alpha::new(0.5).expect("constant"),
                char_alpha: Alpha::new(0.8).expect("constant"),
                cnn: CnnConfig::default(),
            },
            pretrained_cased: None,
            pretrained_uncased: None,
            freeze_embeddings: false,
            hidden: vec![512, 512, 512],
            activation: Activation::Relu,
            schedule: TrainSchedule {
                epochs,
                ..TrainSchedule::default()
            },
            sampling: SamplingConfig::default(),
            max_span: DEFAULT_MAX_SPAN,
            decode: DecodeConfig::default(),
            threads: 1,
            explicit: BTreeMap::new(),
        }
    }

    /// Profile defaults, then `file` entries, then `flags`; the profile itself
    /// is taken from the flags, else the file, else `conll`.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let find = |entries: &[(String, String)]| {
            entries
                .iter()
                .rev()
                .find(|(k, _)| k == "profile")
                .map(|(_, v)| v.clone())
        };
        let profile = match find(flags).or_else(|| find(file)) {
            Some(name) => Profile::parse(&name)?,
            None => Profile::Conll,
        };
        let mut cfg = Self::profile(profile);
        for (source, entries) in [(Source::File, file), (Source::Flag, flags)] {
            for (k, v) in entries {
                if k != "profile" {
                    cfg.set(k, v, source)?;
                }
            }
        }
        cfg.check_conflicts()?;
        Ok(cfg)
    }

    pub fn source_of(&self, key: &str) -> Option<Source> {
        self.explicit.get(key).copied()
    }

    fn check_conflicts(&self) -> Result<()> {
        for (other, set) in [("dev", self.dev.is_some()), ("test", self.test.is_some())] {
            if !set || self.split.is_none() {
                continue;
            }
            if let (Some(a), Some(b)) = (self.source_of(other), self.source_of("split")) {
                let name = |key: &str, s: Source| match s {
                    Source::Flag => format!("--{key}"),
                    Source::File => format!("`{key}` in the config file"),
                };
                return Err(Error::Usage(format!(
                    "{} conflicts with {}: a split carves dev and test sets out of the training corpus",
                    name(other, a),
                    name("split", b)
                )));
            }
        }
        Ok(())
    }

    /// Applies one setting. Unknown keys and malformed values are usage errors.
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Usage(format!("{key} = {value:?}: {what}"));
        fn num<T: FromStr>(v: &str, bad: impl Fn(&str) -> Error) -> Result<T> {
            v.parse().map_err(|_| bad("not a valid number"))
        }
        let flag = |v: &str| match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(bad("expected true or false")),
        };
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|_| bad("expected a comma-separated list of integers")))
                .collect()
        };
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let alpha = |v: &str| Alpha::new(num(v, bad)?).map_err(|e| Error::Usage(format!("{key}: {e}")));
        let usage = |e: Error| Error::Usage(format!("{key}: {e}"));

        match key {
            "profile" => {
                let p = Profile::parse(value)?;
                if p != self.profile {
                    return Err(bad("the profile can only be chosen before other settings"));
                }
            }
            "train" => self.train = path(value),
            "dev" => self.dev = path(value),
            "test" => self.test = path(value),
            "split" => {
                self.split = if value.is_empty() || value == "none" {
                    None
                } else {
                    let parts: Vec<f64> = value
                        .split(':')
                        .map(|x| x.trim().parse::<f64>().map_err(|_| bad("expected train:dev:test ratios")))
                        .collect::<Result<_>>()?;
                    let [a, b, c] = parts[..] else {
                        return Err(bad("expected three ratios"));
                    };
                    let total = a + b + c;
                    if parts.iter().any(|r| *r < 0.0) || total <= 0.0 {
                        return Err(bad("ratios must be non-negative with a positive sum"));
                    }
                    Some([a / total, b / total, c / total])
                };
            }
            "split_seed" => self.split_seed = num(value, bad)?,
            "labels" => self.labels = LabelSet::parse(value).map_err(usage)?,
            "min_count" => self.min_count = num(value, bad)?,
            "features" => self.features.selection = FeatureSelection::parse(value).map_err(usage)?,
            "word_dim" => self.features.word_dim = num(value, bad)?,
            "char_dim" => self.features.char_dim = num(value, bad)?,
            "word_alpha" => self.features.word_alpha = alpha(value)?,
            "char_alpha" => self.features.char_alpha = alpha(value)?,
            "cnn_heights" => {
                let count = self.features.cnn.groups.first().map_or(32, |g| g.1);
                self.features.cnn.groups = list(value)?.into_iter().map(|h| (h, count)).collect();
            }
            "cnn_kernels" => {
                let n: usize = num(value, bad)?;
                for g in &mut self.features.cnn.groups {
                    g.1 = n;
                }
            }
            "cnn_activation" => self.features.cnn.activation = Activation::parse(value).map_err(usage)?,
            "pretrained_cased" => self.pretrained_cased = path(value),
            "pretrained_uncased" => self.pretrained_uncased = path(value),
            "freeze_embeddings" => self.freeze_embeddings = flag(value)?,
            "hidden" => self.hidden = list(value)?,
            "activation" => self.activation = Activation::parse(value).map_err(usage)?,
            "epochs" => self.schedule.epochs = num(value, bad)?,
            "lr" => self.schedule.lr_initial = num(value, bad)?,
            "lr_final_fraction" => {
                self.schedule.lr_final_fraction = match value.split_once('/') {
                    Some((a, b)) => num::<f64>(a.trim(), bad)? / num::<f64>(b.trim(), bad)?,
                    None => num(value, bad)?,
                }
            }
            "dropout_initial" => self.schedule.dropout_initial = num(value, bad)?,
            "dropout_final" => self.schedule.dropout_final = num(value, bad)?,
            "input_dropout" => self.schedule.input_dropout = flag(value)?,
            "batch_size" => self.schedule.batch_size = num(value, bad)?,
            "seed" => self.schedule.seed = num(value, bad)?,
            "producers" => self.schedule.producers = num(value, bad)?,
            "queue_capacity" => self.schedule.queue_capacity = num(value, bad)?,
            "max_span" => {
                self.max_span = num(value, bad)?;
                self.decode.max_span = self.max_span;
            }
            "negative_ratio" => self.sampling.negative_ratio = num(value, bad)?,
            "min_negatives" => self.sampling.min_negatives = num(value, bad)?,
            "threshold" => self.decode.threshold = num(value, bad)?,
            "strategy" => self.decode.strategy = Strategy::parse(value).map_err(usage)?,
            "nested" => self.decode.nested = flag(value)?,
            "max_depth" => self.decode.max_depth = num(value, bad)?,
            "threads" => self.threads = num(value, bad)?,
            _ => return Err(Error::Usage(format!("unknown setting {key:?}"))),
        }
        self.explicit.insert(key.to_string(), source);
        Ok(())
    }

    /// Checks value ranges across all sections.
    pub fn validate(&self) -> Result<()> {
        let usage = |e: Error| Error::Usage(e.to_string());
        self.features.validate().map_err(usage)?;
        self.schedule.validate().map_err(usage)?;
        self.decode.validate().map_err(usage)?;
        if self.min_count == 0 || self.max_span == 0 || self.threads == 0 {
            return Err(Error::Usage("min_count, max_span and threads must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Usage("hidden layer sizes must be positive".into()));
        }
        if self.activation == Activation::Softmax {
            return Err(Error::Usage("hidden activation must be sigmoid or relu".into()));
        }
        if self.sampling.negative_ratio.is_nan() || self.sampling.negative_ratio < 0.0 {
            return Err(Error::Usage("negative_ratio must be non-negative".into()));
        }
        Ok(())
    }

    /// The effective configuration as `key = value` lines, re-readable by
    /// [`parse_kv`].
    pub fn to_kv(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let sel = self.features.selection;
        let mut blocks = Vec::new();
        for (casing, set) in [("cased", sel.cased), ("uncased", sel.uncased)] {
            for f in crate::features::WordFeature::ALL {
                if set.contains(f) {
                    blocks.push(format!("{casing}.{}", f.name()));
                }
            }
        }
        if sel.char_fofe {
            blocks.push("char.fofe".into());
        }
        if sel.char_cnn {
            blocks.push("char.cnn".into());
        }
        let heights: Vec<usize> = self.features.cnn.groups.iter().map(|g| g.0).collect();
        let s = &self.schedule;
        let values: Vec<(&str, String)> = vec![
            ("profile", self.profile.name().into()),
            ("train", opt(&self.train)),
            ("dev", opt(&self.dev)),
            ("test", opt(&self.test)),
            (
                "split",
                self.split
                    .map(|r| format!("{}:{}:{}", r[0], r[1], r[2]))
                    .unwrap_or_else(|| "none".into()),
            ),
            ("split_seed", self.split_seed.to_string()),
            ("labels", self.labels.types().join(",")),
            ("min_count", self.min_count.to_string()),
            ("features", blocks.join(",")),
            ("word_dim", self.features.word_dim.to_string()),
            ("char_dim", self.features.char_dim.to_string()),
            ("word_alpha", self.features.word_alpha.to_string()),
            ("char_alpha", self.features.char_alpha.to_string()),
            ("cnn_heights", join(&heights)),
            (
                "cnn_kernels",
                self.features.cnn.groups.first().map_or(32, |g| g.1).to_string(),
            ),
            ("cnn_activation", self.features.cnn.activation.name().into()),
            ("pretrained_cased", opt(&self.pretrained_cased)),
            ("pretrained_uncased", opt(&self.pretrained_uncased)),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
            ("hidden", join(&self.hidden)),
            ("activation", self.activation.name().into()),
            ("epochs", s.epochs.to_string()),
            ("lr", s.lr_initial.to_string()),
            ("lr_final_fraction", s.lr_final_fraction.to_string()),
            ("dropout_initial", s.dropout_initial.to_string()),
            ("dropout_final", s.dropout_final.to_string()),
            ("input_dropout", s.input_dropout.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("seed", s.seed.to_string()),
            ("producers", s.producers.to_string()),
            ("queue_capacity", s.queue_capacity.to_string()),
            ("max_span", self.max_span.to_string()),
            ("negative_ratio", self.sampling.negative_ratio.to_string()),
            ("min_negatives", self.sampling.min_negatives.to_string()),
            ("threshold", self.decode.threshold.to_string()),
            ("strategy", self.decode.strategy.name().into()),
            ("nested", self.decode.nested.to_string()),
            ("max_depth", self.decode.max_depth.to_string()),
            ("threads", self.threads.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("{source}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn profiles() {
        let conll = RunConfig::resolve(&[], &[]).unwrap();
        assert_eq!(conll.schedule.epochs, 128);
        assert_eq!(conll.features.word_dim, 256);
        assert_eq!(conll.schedule.lr_initial, 0.128);
        assert_eq!(conll.hidden, vec![512, 512, 512]);
        let kbp = RunConfig::resolve(&kv(&[("profile", "kbp")]), &[]).unwrap();
        assert_eq!(kbp.schedule.epochs, 256);
        assert_eq!(kbp.schedule.lr_initial, 0.128);
        assert_eq!(kbp.split, Some([0.90, 0.05, 0.05]));
    }

    #[test]
    fn flags_override_file() {
        let file = kv(&[("epochs", "10"), ("lr", "0.5")]);
        let flags = kv(&[("epochs", "3")]);
        let c = RunConfig::resolve(&file, &flags).unwrap();
        assert_eq!(c.schedule.epochs, 3);
        assert_eq!(c.schedule.lr_initial, 0.5);
        assert_eq!(c.source_of("epochs"), Some(Source::Flag));
        assert_eq!(c.source_of("lr"), Some(Source::File));
    }

    #[test]
    fn flag_profile_wins_and_file_values_stay() {
        let file = kv(&[("profile", "conll"), ("word_dim", "8")]);
        let c = RunConfig::resolve(&file, &kv(&[("profile", "kbp")])).unwrap();
        assert_eq!(c.profile, Profile::Kbp);
        assert_eq!(c.schedule.epochs, 256);
        assert_eq!(c.features.word_dim, 8);
    }

    #[test]
    fn dev_and_split_conflict() {
        let err = RunConfig::resolve(&[], &kv(&[("dev", "d.txt"), ("split", "8:1:1")])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("--dev") && msg.contains("--split"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::resolve(&kv(&[("split", "8:1:1")]), &kv(&[("test", "t")])).unwrap_err();
        assert!(err.to_string().contains("config file"));
    }

    #[test]
    fn malformed_values() {
        for (k, v) in [
            ("epochs", "many"),
            ("nope", "1"),
            ("word_alpha", "1.5"),
            ("split", "1:1"),
            ("hidden", "5,x"),
            ("strategy", "random"),
        ] {
            let err = RunConfig::resolve(&[], &kv(&[(k, v)])).unwrap_err();
            assert!(matches!(err, Error::Usage(_)), "{k}: {err}");
        }
    }

    #[test]
    fn kv_round_trip() {
        let c = RunConfig::resolve(
            &[],
            &kv(&[
                ("profile", "kbp"),
                ("features", "cased.bow,char.cnn"),
                ("cnn_heights", "2,5"),
                ("cnn_kernels", "7"),
                ("lr_final_fraction", "1/8"),
                ("nested", "true"),
            ]),
        )
        .unwrap();
        let text = c.to_kv();
        let back = RunConfig::resolve(&parse_kv(&text, "t").unwrap(), &[]).unwrap();
        assert_eq!(back.to_kv(), text);
        assert_eq!(back.features.cnn.groups, vec![(2, 7), (5, 7)]);
        assert_eq!(back.schedule.lr_final_fraction, 0.125);
    }

    #[test]
    fn kv_syntax() {
        let parsed = parse_kv("# comment\n\nepochs = 4  # trailing\n", "f").unwrap();
        assert_eq!(parsed, kv(&[("epochs", "4")]));
        assert!(parse_kv("epochs 4", "f").is_err());
    }
}
