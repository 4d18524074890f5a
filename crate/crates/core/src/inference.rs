//! Decoding: score every fragment of a sentence, keep confident non-NONE
//! fragments, and resolve overlaps greedily (optionally nesting).

use std::cmp::Ordering;
use std::thread;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, LabelSet, ScoredSpan, Sentence, TaggedSentence, Vocabularies};
use crate::error::{Error, Result};
use crate::features::SentenceCodes;
use crate::fragments::{enumerate, Fragment, DEFAULT_MAX_SPAN};
use crate::network::{argmax, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Among overlapping predictions keep the most probable.
    HighestFirst,
    /// Among overlapping predictions keep the longest.
    LongestFirst,
}

impl Strategy {
    pub fn parse(name: &str) -> Result<Self> {
        match name.replace('-', "_").as_str() {
            "highest_first" | "highest" => Ok(Strategy::HighestFirst),
            "longest_first" | "longest" => Ok(Strategy::LongestFirst),
            _ => Err(Error::InvalidParameter(format!(
                "unknown strategy {name:?} (highest-first, longest-first)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::HighestFirst => "highest-first",
            Strategy::LongestFirst => "longest-first",
        }
    }

    /// Total order, best first. Highest-first: score, then length, then
    /// earlier start. Longest-first: length, then score, then earlier start.
    /// Remaining ties fall to the label name.
    pub fn compare(self, a: &Prediction, b: &Prediction) -> Ordering {
        let score = b.score.total_cmp(&a.score);
        let len = b.fragment.len().cmp(&a.fragment.len());
        let primary = match self {
            Strategy::HighestFirst => score.then(len),
            Strategy::LongestFirst => len.then(score),
        };
        primary
            .then(a.fragment.sentence_id.cmp(&b.fragment.sentence_id))
            .then(a.fragment.start.cmp(&b.fragment.start))
            .then(a.fragment.end.cmp(&b.fragment.end))
            .then_with(|| a.label.cmp(&b.label))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Winning-class probability must exceed this.
    pub threshold: f64,
    pub strategy: Strategy,
    pub nested: bool,
    pub max_depth: usize,
    pub max_span: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            strategy: Strategy::HighestFirst,
            nested: false,
            max_depth: DEFAULT_MAX_SPAN,
            max_span: DEFAULT_MAX_SPAN,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidParameter(format!(
                "threshold {} must lie in [0, 1)",
                self.threshold
            )));
        }
        if self.max_depth == 0 || self.max_span == 0 {
            return Err(Error::InvalidParameter("max depth and max span must be positive".into()));
        }
        Ok(())
    }
}

/// A fragment accepted as an entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fragment: Fragment,
    pub label: String,
    pub score: f64,
}

impl Prediction {
    pub fn new(sentence_id: usize, start: usize, end: usize, label: impl Into<String>, score: f64) -> Self {
        Self {
            fragment: Fragment::new(sentence_id, start, end),
            label: label.into(),
            score,
        }
    }

    pub fn to_scored_span(&self) -> ScoredSpan {
        ScoredSpan {
            start: self.fragment.start,
            end: self.fragment.end,
            label: self.label.clone(),
            score: Some(self.score),
        }
    }

    pub fn entity(&self) -> EntitySpan {
        EntitySpan::new(self.fragment.start, self.fragment.end, self.label.clone())
    }
}

/// Class distributions for every fragment of up to `max_span` tokens, scored
/// in batches of `batch_size` (`None` scores them all at once).
pub fn score_sentence_batched(
    model: &Model,
    sentence_id: usize,
    sentence: &Sentence,
    vocabs: &Vocabularies,
    max_span: usize,
    batch_size: Option<usize>,
) -> Result<(Vec<Fragment>, Array2<f64>)> {
    let fragments = enumerate(sentence_id, sentence.len(), max_span);
    let classes = model.labels.num_classes();
    if fragments.is_empty() {
        return Ok((fragments, Array2::zeros((0, classes))));
    }
    let codes = SentenceCodes::new(sentence, vocabs, &model.features);
    let inputs = fragments
        .iter()
        .map(|f| codes.fragment(f.start, f.end))
        .collect::<Result<Vec<_>>>()?;
    let size = batch_size.unwrap_or(inputs.len()).max(1);
    let mut probs = Array2::zeros((inputs.len(), classes));
    for (i, chunk) in inputs.chunks(size).enumerate() {
        let p = model.predict(chunk)?;
        probs
            .slice_mut(ndarray::s![i * size..i * size + chunk.len(), ..])
            .assign(&p);
    }
    Ok((fragments, probs))
}

/// Scores all fragments of a sentence as one batch.
pub fn score_sentence(
    model: &Model,
    sentence_id: usize,
    sentence: &Sentence,
    vocabs: &Vocabularies,
    max_span: usize,
) -> Result<(Vec<Fragment>, Array2<f64>)> {
    score_sentence_batched(model, sentence_id, sentence, vocabs, max_span, None)
}

/// Keeps fragments whose most probable class is an entity type with
/// probability above `threshold`.
pub fn prune(fragments: &[Fragment], probs: &Array2<f64>, labels: &LabelSet, threshold: f64) -> Vec<Prediction> {
    let none = labels.none_id();
    fragments
        .iter()
        .zip(probs.rows())
        .filter_map(|(f, row)| {
            let (class, p) = argmax(row);
            (class != none && p > threshold).then(|| Prediction {
                fragment: *f,
                label: labels.name(class).to_string(),
                score: p,
            })
        })
        .collect()
}

fn sort_by_position(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        a.fragment
            .cmp(&b.fragment)
            .then_with(|| a.label.cmp(&b.label))
            .then(a.score.total_cmp(&b.score))
    });
}

/// Non-overlapping subset of `predictions`: visit them best first and keep each
/// one that overlaps nothing kept so far. Output is in position order.
pub fn resolve(predictions: &[Prediction], strategy: Strategy) -> Vec<Prediction> {
    let mut order: Vec<&Prediction> = predictions.iter().collect();
    order.sort_by(|a, b| strategy.compare(a, b));
    let mut kept: Vec<Prediction> = Vec::new();
    for p in order {
        if !kept.iter().any(|k| k.fragment.overlaps(&p.fragment)) {
            kept.push(p.clone());
        }
    }
    sort_by_position(&mut kept);
    kept
}

/// Resolves the top level, then recursively resolves the predictions strictly
/// contained in each kept span, down to `max_depth` levels. Output is in
/// position order.
pub fn resolve_nested(predictions: &[Prediction], strategy: Strategy, max_depth: usize) -> Vec<Prediction> {
    fn level(pool: &[Prediction], strategy: Strategy, depth: usize, out: &mut Vec<Prediction>) {
        for kept in resolve(pool, strategy) {
            if depth > 1 {
                let inner: Vec<Prediction> = pool
                    .iter()
                    .filter(|p| kept.fragment.strictly_contains(&p.fragment))
                    .cloned()
                    .collect();
                if !inner.is_empty() {
                    level(&inner, strategy, depth - 1, out);
                }
            }
            out.push(kept);
        }
    }
    let mut out = Vec::new();
    level(predictions, strategy, max_depth.max(1), &mut out);
    sort_by_position(&mut out);
    out
}

/// Prunes and resolves one sentence's predictions.
pub fn decode_sentence(
    model: &Model,
    sentence_id: usize,
    sentence: &Sentence,
    vocabs: &Vocabularies,
    config: &DecodeConfig,
) -> Result<Vec<Prediction>> {
    let (fragments, probs) = score_sentence(model, sentence_id, sentence, vocabs, config.max_span)?;
    let candidates = prune(&fragments, &probs, &model.labels, config.threshold);
    Ok(if config.nested {
        resolve_nested(&candidates, config.strategy, config.max_depth)
    } else {
        resolve(&candidates, config.strategy)
    })
}

/// Decodes a corpus on `threads` worker threads; the result is independent of
/// the thread count.
pub fn decode_corpus(
    model: &Model,
    sentences: &[Sentence],
    vocabs: &Vocabularies,
    config: &DecodeConfig,
    threads: usize,
) -> Result<Vec<Vec<Prediction>>> {
    config.validate()?;
    let threads = threads.max(1);
    if threads == 1 || sentences.len() < 2 {
        return sentences
            .iter()
            .enumerate()
            .map(|(i, s)| decode_sentence(model, i, s, vocabs, config))
            .collect();
    }
    let chunk = sentences.len().div_ceil(threads);
    thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, s)| decode_sentence(model, c * chunk + i, s, vocabs, config))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(sentences.len());
        for h in handles {
            out.extend(h.join().expect("decoder thread panicked")?);
        }
        Ok(out)
    })
}

/// JSON-lines records for decoded sentences.
pub fn to_tagged(sentences: &[Sentence], predictions: &[Vec<Prediction>]) -> Vec<TaggedSentence> {
    sentences
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (s, preds))| TaggedSentence {
            doc_id: s.doc_id.clone(),
            sentence_id: i,
            tokens: s.tokens_raw.clone(),
            spans: preds.iter().map(Prediction::to_scored_span).collect(),
        })
        .collect()
}
