//! Annotated sentences, CoNLL column files, JSON-lines span files,
//! token normalization and vocabulary construction.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::encoding::{Vocabulary, PAD, UNK};
use crate::error::{Error, Result};

/// Name of the rejection class appended after the entity types.
pub const NONE: &str = "NONE";

/// Shipped digit-normalization table.
pub const DEFAULT_NORMALIZATION_RULES: &str = include_str!("../data/normalize.rules");

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Entity types known to a model. Class ids are positions in `types`; the
/// NONE class takes id `types.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    types: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let types: Vec<String> = types.into_iter().map(Into::into).collect();
        if types.is_empty() {
            return Err(Error::InvalidParameter("label set is empty".into()));
        }
        for (i, t) in types.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!("bad entity type {t:?}")));
            }
            if t == NONE {
                return Err(Error::InvalidParameter(format!(
                    "{NONE} is reserved for the rejection class"
                )));
            }
            if types[..i].contains(t) {
                return Err(Error::InvalidParameter(format!("duplicate entity type {t}")));
            }
        }
        Ok(Self { types })
    }

    /// The four CoNLL-2003 types.
    pub fn conll() -> Self {
        Self::new(["PER", "LOC", "ORG", "MISC"]).expect("static label set")
    }

    /// Parses a comma-separated type list.
    pub fn parse(list: &str) -> Result<Self> {
        Self::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn num_classes(&self) -> usize {
        self.types.len() + 1
    }

    pub fn none_id(&self) -> usize {
        self.types.len()
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        if label == NONE {
            return Some(self.none_id());
        }
        self.types.iter().position(|t| t == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.types.iter().any(|t| t == label)
    }

    pub fn name(&self, class: usize) -> &str {
        self.types.get(class).map(String::as_str).unwrap_or(NONE)
    }
}

/// A tokenized sentence with its surface variants and gold entity spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub doc_id: String,
    pub tokens_raw: Vec<String>,
    /// Lowercased digit-normalized tokens.
    pub tokens_lower: Vec<String>,
    /// Digit-normalized tokens, case preserved.
    pub tokens_norm: Vec<String>,
    pub gold: Vec<EntitySpan>,
}

impl Sentence {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<String>, gold: Vec<EntitySpan>) -> Result<Self> {
        let normalizer = Normalizer::shared();
        let tokens_norm: Vec<String> = tokens.iter().map(|t| normalizer.normalize(t)).collect();
        let tokens_lower = tokens_norm.iter().map(|t| t.to_lowercase()).collect();
        for g in &gold {
            if g.start >= g.end || g.end > tokens.len() {
                return Err(Error::InvalidSpan {
                    start: g.start,
                    end: g.end,
                    len: tokens.len(),
                });
            }
        }
        Ok(Self {
            doc_id: doc_id.into(),
            tokens_raw: tokens,
            tokens_lower,
            tokens_norm,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_raw.is_empty()
    }

    /// Raw text of tokens `start..end`, joined by single spaces.
    pub fn text(&self, start: usize, end: usize) -> String {
        self.tokens_raw[start..end].join(" ")
    }

    pub fn to_tagged(&self, sentence_id: usize) -> TaggedSentence {
        TaggedSentence {
            doc_id: self.doc_id.clone(),
            sentence_id,
            tokens: self.tokens_raw.clone(),
            spans: self
                .gold
                .iter()
                .map(|g| ScoredSpan {
                    start: g.start,
                    end: g.end,
                    label: g.label.clone(),
                    score: None,
                })
                .collect(),
        }
    }
}

/// One line of the JSON-lines span format used for predictions and for
/// (possibly nested) gold annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub doc_id: String,
    pub sentence_id: usize,
    pub tokens: Vec<String>,
    pub spans: Vec<ScoredSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ScoredSpan {
    pub fn entity(&self) -> EntitySpan {
        EntitySpan::new(self.start, self.end, self.label.clone())
    }
}

/// Regex table mapping digit-bearing tokens onto placeholder tokens.
#[derive(Debug)]
pub struct Normalizer {
    rules: Vec<(String, Regex)>,
}

impl Normalizer {
    /// Parses a rule table: `<replacement> <regex>` per line, `#` comments.
    pub fn from_rules(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (replacement, pattern) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::parse(format!("rule line {}", lineno + 1), "expected <replacement> <regex>"))?;
            if replacement.chars().any(|c| c.is_ascii_digit()) {
                return Err(Error::parse(
                    format!("rule line {}", lineno + 1),
                    "replacement tokens must not contain digits",
                ));
            }
            let re = Regex::new(pattern.trim())
                .map_err(|e| Error::parse(format!("rule line {}", lineno + 1), e.to_string()))?;
            rules.push((replacement.to_string(), re));
        }
        Ok(Self { rules })
    }

    /// The shipped table, compiled once.
    pub fn shared() -> &'static Normalizer {
        static SHARED: OnceLock<Normalizer> = OnceLock::new();
        SHARED.get_or_init(|| {
            Normalizer::from_rules(DEFAULT_NORMALIZATION_RULES).expect("shipped rule table")
        })
    }

    pub fn normalize(&self, token: &str) -> String {
        if token.bytes().any(|b| b.is_ascii_digit()) {
            for (replacement, re) in &self.rules {
                if re.is_match(token) {
                    return replacement.clone();
                }
            }
        }
        token.to_string()
    }
}

/// Maps digit-bearing tokens to `⟨number⟩` / `⟨date⟩` using the shipped table.
pub fn normalize(token: &str) -> String {
    Normalizer::shared().normalize(token)
}

/// IOB2 tags for non-overlapping spans.
pub fn spans_to_iob(len: usize, spans: &[EntitySpan]) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort();
    let mut last_end = 0;
    for s in sorted {
        if s.start >= s.end || s.end > len {
            return Err(Error::InvalidSpan {
                start: s.start,
                end: s.end,
                len,
            });
        }
        if s.start < last_end {
            return Err(Error::InvalidParameter(format!(
                "overlapping spans cannot be written as IOB ({}..{})",
                s.start, s.end
            )));
        }
        tags[s.start] = format!("B-{}", s.label);
        for t in &mut tags[s.start + 1..s.end] {
            *t = format!("I-{}", s.label);
        }
        last_end = s.end;
    }
    Ok(tags)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag<'a>(tag: &'a str, labels: &LabelSet) -> Option<Tag<'a>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, ty) = tag.split_once('-')?;
    if !labels.contains(ty) {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(ty)),
        "I" => Some(Tag::Inside(ty)),
        _ => None,
    }
}

/// Non-fatal findings while reading annotated data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataWarning {
    pub location: String,
    pub message: String,
}

/// Decodes IOB/IOB2 tags into spans. `I-X` that does not continue an `X` chain
/// opens a new span; each such repair is reported with its token index.
pub fn iob_to_spans(tags: &[&str], labels: &LabelSet) -> Result<(Vec<EntitySpan>, Vec<usize>)> {
    let mut spans = Vec::new();
    let mut repaired = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, &raw) in tags.iter().enumerate() {
        let tag = parse_tag(raw, labels)
            .ok_or_else(|| Error::parse(format!("tag {}", i + 1), format!("unknown tag {raw:?}")))?;
        match tag {
            Tag::Outside => {
                if let Some((s, ty)) = open.take() {
                    spans.push(EntitySpan::new(s, i, ty));
                }
            }
            Tag::Begin(ty) => {
                if let Some((s, prev)) = open.take() {
                    spans.push(EntitySpan::new(s, i, prev));
                }
                open = Some((i, ty));
            }
            Tag::Inside(ty) => match open {
                Some((_, prev)) if prev == ty => {}
                _ => {
                    if let Some((s, prev)) = open.take() {
                        spans.push(EntitySpan::new(s, i, prev));
                    }
                    repaired.push(i);
                    open = Some((i, ty));
                }
            },
        }
    }
    if let Some((s, ty)) = open {
        spans.push(EntitySpan::new(s, tags.len(), ty));
    }
    Ok((spans, repaired))
}

/// Parses CoNLL column text: one token per line with the IOB tag in the last
/// column, blank lines between sentences and `-DOCSTART-` lines between
/// documents. Lines with a single column are untagged tokens.
pub fn parse_conll(text: &str, labels: &LabelSet, source: &str) -> Result<(Vec<Sentence>, Vec<DataWarning>)> {
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    let mut doc = 0usize;
    let mut doc_has_content = false;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_line = 0usize;

    let flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     first_line: usize,
                     doc: usize,
                     sentences: &mut Vec<Sentence>,
                     warnings: &mut Vec<DataWarning>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        let (spans, repaired) = iob_to_spans(&tag_refs, labels).map_err(|e| match e {
            Error::Parse { location, message } => {
                let idx: usize = location
                    .trim_start_matches("tag ")
                    .parse()
                    .unwrap_or(1);
                Error::parse(format!("{source}:{}", first_line + idx - 1), message)
            }
            other => other,
        })?;
        for i in repaired {
            let location = format!("{source}:{}", first_line + i);
            debug!("{location}: I- tag without a matching chain treated as B-");
            warnings.push(DataWarning {
                location,
                message: format!("{} starts a chain; treated as B-", tags[i]),
            });
        }
        let sentence = Sentence::new(format!("doc{doc}"), std::mem::take(tokens), spans)?;
        sentences.push(sentence);
        tags.clear();
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut tokens, &mut tags, first_line, doc, &mut sentences, &mut warnings)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags, first_line, doc, &mut sentences, &mut warnings)?;
            if doc_has_content {
                doc += 1;
                doc_has_content = false;
            }
            continue;
        }
        let mut cols = line.split_whitespace();
        let token = cols.next().expect("nonempty line");
        let tag = cols.last().unwrap_or("O");
        if parse_tag(tag, labels).is_none() {
            return Err(Error::parse(format!("{source}:{lineno}"), format!("unknown tag {tag:?}")));
        }
        if tokens.is_empty() {
            first_line = lineno;
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
        doc_has_content = true;
    }
    flush(&mut tokens, &mut tags, first_line, doc, &mut sentences, &mut warnings)?;
    Ok((sentences, warnings))
}

pub fn read_conll(path: impl AsRef<Path>, labels: &LabelSet) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (sentences, warnings) = parse_conll(&text, labels, &path.display().to_string())?;
    if !warnings.is_empty() {
        warn!(
            "{}: {} I- tags opened new chains (first at {})",
            path.display(),
            warnings.len(),
            warnings[0].location
        );
    }
    Ok(sentences)
}

/// Writes sentences in four-column-free `token tag` CoNLL form. Gold spans must
/// not overlap.
pub fn write_conll(sentences: &[Sentence]) -> Result<String> {
    let mut out = String::new();
    let mut last_doc: Option<&str> = None;
    for s in sentences {
        if last_doc != Some(s.doc_id.as_str()) {
            out.push_str("-DOCSTART- O\n\n");
            last_doc = Some(&s.doc_id);
        }
        let tags = spans_to_iob(s.len(), &s.gold)?;
        for (tok, tag) in s.tokens_raw.iter().zip(&tags) {
            let _ = writeln!(out, "{tok} {tag}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_tagged(text: &str, source: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TaggedSentence = serde_json::from_str(line)
            .map_err(|e| Error::parse(format!("{source}:{}", lineno + 1), e.to_string()))?;
        for s in &record.spans {
            if s.start >= s.end || s.end > record.tokens.len() {
                return Err(Error::parse(
                    format!("{source}:{}", lineno + 1),
                    format!("span [{}, {}) outside {} tokens", s.start, s.end, record.tokens.len()),
                ));
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_tagged(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tagged(&text, &path.display().to_string())
}

pub fn write_tagged(records: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

/// Converts JSON-lines records to sentences. Nested gold spans are kept;
/// see [`crate::fragments::gold_from_nested`] for duplicate handling.
pub fn tagged_to_sentences(records: &[TaggedSentence], labels: &LabelSet) -> Result<Vec<Sentence>> {
    records
        .iter()
        .map(|r| {
            let spans: Vec<EntitySpan> = r.spans.iter().map(ScoredSpan::entity).collect();
            for s in &spans {
                if !labels.contains(&s.label) {
                    return Err(Error::parse(
                        format!("sentence {}", r.sentence_id),
                        format!("unknown entity type {:?}", s.label),
                    ));
                }
            }
            let (gold, warnings) = crate::fragments::gold_from_nested(&spans);
            for w in warnings {
                warn!("sentence {}: {}", r.sentence_id, w.message);
            }
            Sentence::new(r.doc_id.clone(), r.tokens.clone(), gold)
        })
        .collect()
}

/// Reads a CoNLL or JSON-lines file, detected from the first non-blank character.
pub fn load_sentences(path: impl AsRef<Path>, labels: &LabelSet) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let records = parse_tagged(&text, &path.display().to_string())?;
        tagged_to_sentences(&records, labels)
    } else {
        read_conll(path, labels)
    }
}

/// Case-sensitive word, case-insensitive word and character vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub cased: Vocabulary,
    pub uncased: Vocabulary,
    pub chars: Vocabulary,
}

impl Vocabularies {
    pub const CASED_FILE: &'static str = "cased.vocab";
    pub const UNCASED_FILE: &'static str = "uncased.vocab";
    pub const CHARS_FILE: &'static str = "chars.vocab";

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.cased.write(dir.join(Self::CASED_FILE))?;
        self.uncased.write(dir.join(Self::UNCASED_FILE))?;
        self.chars.write(dir.join(Self::CHARS_FILE))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            cased: Vocabulary::read(dir.join(Self::CASED_FILE))?,
            uncased: Vocabulary::read(dir.join(Self::UNCASED_FILE))?,
            chars: Vocabulary::read(dir.join(Self::CHARS_FILE))?,
        })
    }

    pub fn fingerprints(&self) -> [String; 3] {
        [
            self.cased.fingerprint(),
            self.uncased.fingerprint(),
            self.chars.fingerprint(),
        ]
    }
}

fn ranked<K: Ord + Clone>(counts: &HashMap<K, usize>, min_count: usize) -> Vec<K> {
    let mut items: Vec<(&K, &usize)> = counts.iter().filter(|(_, &c)| c >= min_count).collect();
    items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Builds the three vocabularies, ordered by (count desc, symbol asc) with
/// `<unk>` last. Words seen fewer than `min_count` times are left out. The
/// character vocabulary holds printable ASCII plus every observed character,
/// then `<pad>` and `<unk>`.
pub fn build_vocab(sentences: &[Sentence], min_count: usize) -> Result<Vocabularies> {
    if min_count == 0 {
        return Err(Error::InvalidParameter("min_count must be at least 1".into()));
    }
    if sentences.iter().all(Sentence::is_empty) {
        return Err(Error::NoData("cannot build vocabularies from an empty corpus".into()));
    }
    let mut cased: HashMap<String, usize> = HashMap::new();
    let mut uncased: HashMap<String, usize> = HashMap::new();
    let mut chars: HashMap<char, usize> = (' '..='~').map(|c| (c, 0)).collect();
    for s in sentences {
        for t in &s.tokens_norm {
            *cased.entry(t.clone()).or_default() += 1;
        }
        for t in &s.tokens_lower {
            *uncased.entry(t.clone()).or_default() += 1;
        }
        for (i, t) in s.tokens_raw.iter().enumerate() {
            if i > 0 {
                *chars.entry(' ').or_default() += 1;
            }
            for c in t.chars() {
                *chars.entry(c).or_default() += 1;
            }
        }
    }
    let char_symbols = ranked(&chars, 0)
        .into_iter()
        .map(String::from)
        .chain([PAD.to_string(), UNK.to_string()])
        .collect();
    Ok(Vocabularies {
        cased: Vocabulary::with_unk(ranked(&cased, min_count)),
        uncased: Vocabulary::with_unk(ranked(&uncased, min_count)),
        chars: Vocabulary::new(char_symbols)?,
    })
}

/// Document-level seeded split into (train, dev, test).
pub fn split(
    sentences: &[Sentence],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<Sentence>, Vec<Sentence>, Vec<Sentence>)> {
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut doc_order: Vec<&str> = Vec::new();
    let mut docs: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in sentences.iter().enumerate() {
        docs.entry(&s.doc_id)
            .or_insert_with(|| {
                doc_order.push(&s.doc_id);
                Vec::new()
            })
            .push(i);
    }
    let n = doc_order.len();
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < needed {
        return Err(Error::Partition(format!(
            "{n} documents cannot fill {needed} non-empty partitions"
        )));
    }

    let counts = allocate(n, &ratios);
    let mut shuffled: Vec<usize> = (0..n).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut parts: [Vec<Sentence>; 3] = Default::default();
    let mut offset = 0;
    for (p, &count) in counts.iter().enumerate() {
        let mut chosen: Vec<usize> = shuffled[offset..offset + count].to_vec();
        chosen.sort_unstable();
        offset += count;
        for d in chosen {
            parts[p].extend(docs[doc_order[d]].iter().map(|&i| sentences[i].clone()));
        }
    }
    let [train, dev, test] = parts;
    Ok((train, dev, test))
}

/// Largest-remainder allocation of `n` items, giving every positive ratio at
/// least one item.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut by_fraction: Vec<usize> = (0..3).collect();
    by_fraction.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in by_fraction.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three partitions");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Counts of gold spans per entity type.
pub fn type_histogram(sentences: &[Sentence]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in sentences {
        for g in &s.gold {
            *out.entry(g.label.clone()).or_default() += 1;
        }
    }
    out
}
