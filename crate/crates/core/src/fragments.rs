//! Candidate fragment enumeration, gold relations and negative down-sampling.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DataWarning, EntitySpan, LabelSet, Sentence};

/// Default maximum fragment length in tokens.
pub const DEFAULT_MAX_SPAN: usize = 7;

/// A contiguous token span `[start, end)` of one sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fragment {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
}

impl Fragment {
    pub fn new(sentence_id: usize, start: usize, end: usize) -> Self {
        Self {
            sentence_id,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Fragment) -> bool {
        self.sentence_id == other.sentence_id && self.start < other.end && other.start < self.end
    }

    /// True when `other` is a proper sub-span of `self`.
    pub fn strictly_contains(&self, other: &Fragment) -> bool {
        self.sentence_id == other.sentence_id
            && self.start <= other.start
            && other.end <= self.end
            && self.len() > other.len()
    }

    pub fn same_span(&self, span: &EntitySpan) -> bool {
        self.start == span.start && self.end == span.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Exact,
    Partial,
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledFragment {
    pub fragment: Fragment,
    pub relation: Relation,
    /// Class id in the model's label set; NONE unless `relation` is exact.
    pub target: usize,
}

/// All fragments of at most `max_span` tokens, shortest first and left to right
/// within a length.
pub fn enumerate(sentence_id: usize, len: usize, max_span: usize) -> Vec<Fragment> {
    let longest = max_span.min(len);
    let mut out = Vec::with_capacity(fragment_count(len, max_span));
    for width in 1..=longest {
        for start in 0..=len - width {
            out.push(Fragment::new(sentence_id, start, start + width));
        }
    }
    out
}

pub fn fragment_count(len: usize, max_span: usize) -> usize {
    (1..=max_span.min(len)).map(|k| len - k + 1).sum()
}

/// Relation of `fragment` to the gold spans of its sentence. Gold labels missing
/// from `labels` are treated as NONE.
pub fn relate(fragment: Fragment, gold: &[EntitySpan], labels: &LabelSet) -> LabeledFragment {
    let none = labels.none_id();
    if let Some(g) = gold.iter().find(|g| fragment.same_span(g)) {
        return LabeledFragment {
            fragment,
            relation: Relation::Exact,
            target: labels.class_of(&g.label).unwrap_or(none),
        };
    }
    let relation = if gold
        .iter()
        .any(|g| fragment.start < g.end && g.start < fragment.end)
    {
        Relation::Partial
    } else {
        Relation::Disjoint
    };
    LabeledFragment {
        fragment,
        relation,
        target: none,
    }
}

/// Enumerates and labels every fragment of one sentence.
pub fn label_sentence(
    sentence_id: usize,
    sentence: &Sentence,
    max_span: usize,
    labels: &LabelSet,
) -> Vec<LabeledFragment> {
    enumerate(sentence_id, sentence.len(), max_span)
        .into_iter()
        .map(|f| relate(f, &sentence.gold, labels))
        .collect()
}

/// Gold spans longer than `max_span`; no fragment can ever match them.
pub fn unreachable_spans(gold: &[EntitySpan], max_span: usize) -> usize {
    gold.iter().filter(|g| g.len() > max_span).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Expected negatives kept per positive, split evenly between the partial
    /// and disjoint pools.
    pub negative_ratio: f64,
    /// Expected negatives kept when there are no positives at all.
    pub min_negatives: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 3.0,
            min_negatives: 100,
        }
    }
}

/// Keeps every exact match and an independent Bernoulli sample of the partial
/// and disjoint fragments, preserving input order. One uniform draw is consumed
/// per negative, in input order.
pub fn downsample<R: Rng + ?Sized>(
    labeled: &[LabeledFragment],
    config: &SamplingConfig,
    rng: &mut R,
) -> Vec<LabeledFragment> {
    let positives = labeled.iter().filter(|l| l.relation == Relation::Exact).count();
    let partial = labeled.iter().filter(|l| l.relation == Relation::Partial).count();
    let disjoint = labeled.len() - positives - partial;

    let target = if positives == 0 {
        if partial + disjoint > 0 {
            warn!(
                "no positive fragments; keeping about {} negatives",
                config.min_negatives
            );
        }
        config.min_negatives as f64
    } else {
        config.negative_ratio * positives as f64
    };
    let (keep_partial, keep_disjoint) = split_quota(target, partial, disjoint);
    let p_partial = keep_probability(keep_partial, partial);
    let p_disjoint = keep_probability(keep_disjoint, disjoint);

    labeled
        .iter()
        .filter(|l| match l.relation {
            Relation::Exact => true,
            Relation::Partial => rng.random::<f64>() < p_partial,
            Relation::Disjoint => rng.random::<f64>() < p_disjoint,
        })
        .cloned()
        .collect()
}

/// Splits an expected negative count between two pools, moving any quota a
/// pool cannot absorb to the other one.
fn split_quota(target: f64, a: usize, b: usize) -> (f64, f64) {
    let half = target / 2.0;
    let (a, b) = (a as f64, b as f64);
    let mut qa = half.min(a);
    let mut qb = half.min(b);
    let spare = target - qa - qb;
    if spare > 0.0 {
        let extra_a = spare.min(a - qa);
        qa += extra_a;
        qb = (qb + spare - extra_a).min(b);
    }
    (qa, qb)
}

fn keep_probability(quota: f64, pool: usize) -> f64 {
    if pool == 0 {
        0.0
    } else {
        (quota / pool as f64).clamp(0.0, 1.0)
    }
}

/// Normalizes one sentence's gold annotations, which may nest. Exact duplicates
/// collapse; a span repeated with a different type keeps the first type; spans
/// that cross without nesting are kept and reported.
pub fn gold_from_nested(annotations: &[EntitySpan]) -> (Vec<EntitySpan>, Vec<DataWarning>) {
    let mut kept: Vec<EntitySpan> = Vec::with_capacity(annotations.len());
    let mut warnings = Vec::new();
    for a in annotations {
        if let Some(prev) = kept.iter().find(|k| k.start == a.start && k.end == a.end) {
            if prev.label != a.label {
                warnings.push(DataWarning {
                    location: format!("span [{}, {})", a.start, a.end),
                    message: format!(
                        "conflicting types {} and {}; keeping {}",
                        prev.label, a.label, prev.label
                    ),
                });
            }
            continue;
        }
        kept.push(a.clone());
    }
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            let overlap = a.start < b.end && b.start < a.end;
            let nested = (a.start <= b.start && b.end <= a.end) || (b.start <= a.start && a.end <= b.end);
            if overlap && !nested {
                warnings.push(DataWarning {
                    location: format!("spans [{}, {}) and [{}, {})", a.start, a.end, b.start, b.end),
                    message: "crossing annotations; both kept".into(),
                });
            }
        }
    }
    (kept, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spans(v: &[Fragment]) -> Vec<(usize, usize)> {
        v.iter().map(|f| (f.start, f.end)).collect()
    }

    #[test]
    fn enumerate_counts() {
        assert_eq!(spans(&enumerate(0, 3, 2)), [(0, 1), (1, 2), (2, 3), (0, 2), (1, 3)]);
        assert_eq!(enumerate(0, 1, 5).len(), 1);
        assert_eq!(enumerate(0, 10, 7).len(), 49);
        assert!(enumerate(0, 0, 7).is_empty());
    }

    fn figure_sentence() -> Sentence {
        let toks = "puck from space for the Toronto Maple Leafs ' home opener against";
        Sentence::new(
            "d",
            toks.split(' ').map(String::from).collect(),
            vec![EntitySpan::new(5, 8, "ORG")],
        )
        .unwrap()
    }

    #[test]
    fn relations_from_the_worked_example() {
        let s = figure_sentence();
        let labels = LabelSet::conll();
        let org = labels.class_of("ORG").unwrap();
        let exact = relate(Fragment::new(0, 5, 8), &s.gold, &labels);
        assert_eq!((exact.relation, exact.target), (Relation::Exact, org));
        assert_eq!(s.text(3, 6), "for the Toronto");
        let partial = relate(Fragment::new(0, 3, 6), &s.gold, &labels);
        assert_eq!((partial.relation, partial.target), (Relation::Partial, labels.none_id()));
        assert_eq!(s.text(1, 4), "from space for");
        let disjoint = relate(Fragment::new(0, 1, 4), &s.gold, &labels);
        assert_eq!((disjoint.relation, disjoint.target), (Relation::Disjoint, labels.none_id()));
    }

    #[test]
    fn partition_counts() {
        let s = figure_sentence();
        let all = label_sentence(0, &s, 7, &LabelSet::conll());
        let count = |r| all.iter().filter(|l| l.relation == r).count();
        assert_eq!(
            count(Relation::Exact) + count(Relation::Partial) + count(Relation::Disjoint),
            fragment_count(s.len(), 7)
        );
        assert_eq!(count(Relation::Exact), 1);
    }

    fn pool(pos: usize, partial: usize, disjoint: usize) -> Vec<LabeledFragment> {
        let mk = |i, relation, target| LabeledFragment {
            fragment: Fragment::new(0, i, i + 1),
            relation,
            target,
        };
        let mut v = Vec::new();
        for i in 0..pos {
            v.push(mk(i, Relation::Exact, 0));
        }
        for i in 0..partial {
            v.push(mk(pos + i, Relation::Partial, 1));
        }
        for i in 0..disjoint {
            v.push(mk(pos + partial + i, Relation::Disjoint, 1));
        }
        v
    }

    #[test]
    fn downsample_ratio_one_replay() {
        let data = pool(10, 500, 500);
        let cfg = SamplingConfig {
            negative_ratio: 1.0,
            min_negatives: 0,
        };
        let kept = downsample(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let negatives = kept.iter().filter(|l| l.relation != Relation::Exact).count();

        // replay: one draw per negative in input order, kept below 5/500
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let expected = (0..1000).filter(|_| rng.random::<f64>() < 0.01).count();
        assert_eq!(negatives, expected);
        assert_eq!(negatives, 7);
        assert_eq!(kept.iter().filter(|l| l.relation == Relation::Exact).count(), 10);
    }

    #[test]
    fn downsample_huge_ratio_keeps_all() {
        let data = pool(10, 30, 70);
        let cfg = SamplingConfig {
            negative_ratio: 1e6,
            min_negatives: 0,
        };
        assert_eq!(downsample(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)), data);
    }

    #[test]
    fn downsample_no_negatives() {
        let data = pool(5, 0, 0);
        let kept = downsample(&data, &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(kept, data);
    }

    #[test]
    fn downsample_no_positives_keeps_floor() {
        let data = pool(0, 0, 1000);
        let cfg = SamplingConfig {
            negative_ratio: 3.0,
            min_negatives: 1000,
        };
        let kept = downsample(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(kept.len(), 1000);
    }

    #[test]
    fn quota_moves_to_larger_pool() {
        assert_eq!(split_quota(10.0, 2, 100), (2.0, 8.0));
        assert_eq!(split_quota(10.0, 100, 1), (9.0, 1.0));
        assert_eq!(split_quota(10.0, 2, 3), (2.0, 3.0));
    }

    #[test]
    fn nested_gold_is_kept() {
        let ann = vec![EntitySpan::new(0, 3, "ORG"), EntitySpan::new(2, 3, "LOC")];
        let (gold, warnings) = gold_from_nested(&ann);
        assert_eq!(gold, ann);
        assert!(warnings.is_empty());
        let s = Sentence::new("d", vec!["University".into(), "of".into(), "Toronto".into()], gold).unwrap();
        let labeled = label_sentence(0, &s, 7, &LabelSet::conll());
        assert_eq!(labeled.iter().filter(|l| l.relation == Relation::Exact).count(), 2);
    }

    #[test]
    fn flat_gold_unchanged() {
        let ann = vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(2, 4, "LOC")];
        let (gold, warnings) = gold_from_nested(&ann);
        assert_eq!(gold, ann);
        assert!(warnings.is_empty());
    }

    #[test]
    fn conflicting_duplicate_keeps_first() {
        let ann = vec![
            EntitySpan::new(0, 2, "ORG"),
            EntitySpan::new(0, 2, "LOC"),
            EntitySpan::new(0, 2, "ORG"),
        ];
        let (gold, warnings) = gold_from_nested(&ann);
        assert_eq!(gold, vec![EntitySpan::new(0, 2, "ORG")]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn crossing_spans_warn() {
        let ann = vec![EntitySpan::new(0, 2, "ORG"), EntitySpan::new(1, 3, "LOC")];
        let (gold, warnings) = gold_from_nested(&ann);
        assert_eq!(gold.len(), 2);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn long_gold_is_unreachable() {
        let gold = vec![EntitySpan::new(0, 9, "ORG"), EntitySpan::new(0, 2, "PER")];
        assert_eq!(unreachable_spans(&gold, 7), 1);
    }
}
