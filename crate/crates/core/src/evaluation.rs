//! Entity-level precision, recall and F1 with exact span and type matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, LabelSet, TaggedSentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean with `0/0 → 0`.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub label: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    fn new(label: &str, counts: Counts) -> Self {
        Self {
            label: label.to_string(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type: Vec<Scores>,
    /// Micro-averaged over all spans.
    pub overall: Scores,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    /// Gold spans longer than the maximum fragment length.
    pub unreachable: usize,
    pub duplicates_collapsed: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .per_type
            .iter()
            .map(|s| s.label.len())
            .chain([7])
            .max()
            .unwrap_or(7);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7}  {:>7}  {:>7}",
            "type", "tp", "fp", "fn", "P", "R", "F1"
        );
        let row = |out: &mut String, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}",
                s.label,
                s.counts.tp,
                s.counts.fp,
                s.counts.fn_,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1
            );
        };
        for s in &self.per_type {
            row(&mut out, s);
        }
        row(&mut out, &self.overall);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}",
            "macro",
            "",
            "",
            "",
            100.0 * self.macro_precision,
            100.0 * self.macro_recall,
            100.0 * self.macro_f1
        );
        if self.unreachable > 0 {
            let _ = writeln!(out, "unreachable gold spans (longer than max span): {}", self.unreachable);
        }
        out
    }
}

/// Scores aligned per-sentence span lists. Identical predictions are collapsed
/// before scoring; gold spans are deduplicated the same way. Labels outside
/// `labels` get their own rows after the known types.
pub fn evaluate_spans(
    predictions: &[Vec<EntitySpan>],
    gold: &[Vec<EntitySpan>],
    labels: &LabelSet,
    max_span: Option<usize>,
) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predicted sentences vs {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut duplicates = 0;
    let mut unreachable = 0;
    let mut n_gold = 0;
    let mut n_pred = 0;
    for (pred, gold) in predictions.iter().zip(gold) {
        let p: BTreeSet<&EntitySpan> = pred.iter().collect();
        let g: BTreeSet<&EntitySpan> = gold.iter().collect();
        duplicates += pred.len() - p.len();
        n_pred += p.len();
        n_gold += g.len();
        if let Some(n) = max_span {
            unreachable += g.iter().filter(|s| s.len() > n).count();
        }
        for s in &p {
            let c = per_label.entry(s.label.clone()).or_default();
            if g.contains(s) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for s in g.difference(&p) {
            per_label.entry(s.label.clone()).or_default().fn_ += 1;
        }
    }
    if duplicates > 0 {
        warn!("collapsed {duplicates} duplicate predictions");
    }

    let mut order: Vec<String> = labels.types().to_vec();
    order.extend(per_label.keys().filter(|l| !labels.contains(l)).cloned());
    let per_type: Vec<Scores> = order
        .iter()
        .map(|l| Scores::new(l, per_label.get(l).copied().unwrap_or_default()))
        .collect();
    let mut total = Counts::default();
    for s in &per_type {
        total.add(s.counts);
    }
    let known = &per_type[..labels.types().len()];
    let mean = |f: fn(&Scores) -> f64| known.iter().map(f).sum::<f64>() / known.len() as f64;
    Ok(EvalReport {
        overall: Scores::new("overall", total),
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        per_type,
        gold_spans: n_gold,
        predicted_spans: n_pred,
        unreachable,
        duplicates_collapsed: duplicates,
    })
}

/// Scores JSON-lines predictions against gold records of the same sentences.
pub fn evaluate(
    predictions: &[TaggedSentence],
    gold: &[TaggedSentence],
    labels: &LabelSet,
    max_span: Option<usize>,
) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predicted sentences vs {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.sentence_id != g.sentence_id || p.doc_id != g.doc_id || p.tokens.len() != g.tokens.len() {
            return Err(Error::Alignment(format!(
                "record {i}: prediction ({}, sentence {}, {} tokens) does not match gold ({}, sentence {}, {} tokens)",
                p.doc_id,
                p.sentence_id,
                p.tokens.len(),
                g.doc_id,
                g.sentence_id,
                g.tokens.len()
            )));
        }
    }
    let spans = |records: &[TaggedSentence]| -> Vec<Vec<EntitySpan>> {
        records
            .iter()
            .map(|r| r.spans.iter().map(|s| s.entity()).collect())
            .collect()
    };
    evaluate_spans(&spans(predictions), &spans(gold), labels, max_span)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(start: usize, end: usize, label: &str) -> EntitySpan {
        EntitySpan::new(start, end, label)
    }

    fn labels() -> LabelSet {
        LabelSet::new(["PER", "LOC"]).unwrap()
    }

    #[test]
    fn perfect_match() {
        let gold = vec![vec![e(0, 1, "PER"), e(2, 4, "LOC")], vec![]];
        let r = evaluate_spans(&gold, &gold, &labels(), None).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_arithmetic() {
        let gold = vec![vec![e(0, 1, "PER"), e(2, 4, "LOC"), e(5, 6, "PER")]];
        let pred = vec![vec![e(0, 1, "PER"), e(2, 4, "PER")]];
        let r = evaluate_spans(&pred, &gold, &labels(), None).unwrap();
        assert_eq!(r.overall.precision, 0.5);
        assert!((r.overall.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.overall.f1 - 0.4).abs() < 1e-15);
        assert_eq!(r.overall.counts, Counts { tp: 1, fp: 1, fn_: 2 });
        let per: Vec<Counts> = r.per_type.iter().map(|s| s.counts).collect();
        assert_eq!(per, vec![Counts { tp: 1, fp: 1, fn_: 1 }, Counts { tp: 0, fp: 0, fn_: 1 }]);
    }

    #[test]
    fn empty_predictions() {
        let gold = vec![vec![e(0, 1, "PER")]];
        let r = evaluate_spans(&[vec![]], &gold, &labels(), None).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicates_and_unknown_labels() {
        let gold = vec![vec![e(0, 1, "PER"), e(0, 9, "LOC")]];
        let pred = vec![vec![e(0, 1, "PER"), e(0, 1, "PER"), e(3, 4, "MISC")]];
        let r = evaluate_spans(&pred, &gold, &labels(), Some(7)).unwrap();
        assert_eq!(r.duplicates_collapsed, 1);
        assert_eq!(r.unreachable, 1);
        assert_eq!(r.per_type.last().unwrap().label, "MISC");
        assert_eq!(r.overall.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert!(r.to_table().contains("MISC"));
        assert!(r.to_json().contains("\"fn\""));
    }

    #[test]
    fn misalignment() {
        let a = TaggedSentence {
            doc_id: "d".into(),
            sentence_id: 0,
            tokens: vec!["x".into()],
            spans: vec![],
        };
        let b = TaggedSentence {
            sentence_id: 1,
            ..a.clone()
        };
        let l = labels();
        assert!(matches!(evaluate(std::slice::from_ref(&a), &[b], &l, None), Err(Error::Alignment(_))));
        assert!(matches!(evaluate(std::slice::from_ref(&a), &[], &l, None), Err(Error::Alignment(_))));
        evaluate(std::slice::from_ref(&a), std::slice::from_ref(&a), &l, None).unwrap();
    }
}
