//! Small generated corpora for smoke tests and demos.
//!
//! Sentences come from a handful of templates whose slots take an entity of a
//! random type, so the surrounding words say where an entity is but not which
//! type it has; only the entity's own words do.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EntitySpan, LabelSet, Sentence};

const FIRST_NAMES: &[&str] = &["Alice", "Bruno", "Chen", "Dana", "Emil", "Farah"];
const LAST_NAMES: &[&str] = &["Moreau", "Okafor", "Silva"];
const PLACES: &[&str] = &["Oslo", "Lima", "Kyoto", "Nairobi", "Quebec", "Dakar"];
const PLACE_PREFIXES: &[&str] = &["North", "Port"];
const COMPANIES: &[&str] = &["Acme", "Globex", "Initech", "Vandelay"];
const COMPANY_SUFFIXES: &[&str] = &["Corp", "Group"];

/// `{}` marks an entity slot.
const TEMPLATES: &[&str] = &[
    "yesterday {} was mentioned in the report .",
    "we heard about {} and {} today .",
    "the news about {} spread quickly .",
    "{} appeared in the headlines again .",
    "reports say {} is growing .",
    "nobody expected {} to win .",
    "a letter from {} reached {} on time .",
    "{} remains quiet .",
];

pub fn labels() -> LabelSet {
    LabelSet::new(["PER", "LOC", "ORG"]).expect("static label set")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub sentences_per_doc: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sentences: 40,
            sentences_per_doc: 5,
            seed: 1,
        }
    }
}

fn entity<R: Rng>(label: &str, rng: &mut R) -> Vec<String> {
    let pick = |list: &[&str], rng: &mut R| list.choose(rng).expect("nonempty").to_string();
    let two_words = rng.random_bool(0.35);
    match label {
        "PER" if two_words => vec![pick(FIRST_NAMES, rng), pick(LAST_NAMES, rng)],
        "PER" => vec![pick(FIRST_NAMES, rng)],
        "LOC" if two_words => vec![pick(PLACE_PREFIXES, rng), pick(PLACES, rng)],
        "LOC" => vec![pick(PLACES, rng)],
        _ if two_words => vec![pick(COMPANIES, rng), pick(COMPANY_SUFFIXES, rng)],
        _ => vec![pick(COMPANIES, rng)],
    }
}

pub fn generate(config: &SyntheticConfig) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let types = labels();
    let per_doc = config.sentences_per_doc.max(1);
    (0..config.sentences)
        .map(|i| {
            let template = TEMPLATES.choose(&mut rng).expect("nonempty");
            let mut tokens = Vec::new();
            let mut gold = Vec::new();
            for word in template.split(' ') {
                if word == "{}" {
                    let label = types.types().choose(&mut rng).expect("nonempty").clone();
                    let words = entity(&label, &mut rng);
                    gold.push(EntitySpan::new(tokens.len(), tokens.len() + words.len(), label));
                    tokens.extend(words);
                } else {
                    tokens.push(word.to_string());
                }
            }
            let doc = format!("synthetic-{}-{}", config.seed, i / per_doc);
            Sentence::new(doc, tokens, gold).expect("generated spans are in bounds")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_and_sized() {
        let c = SyntheticConfig::default();
        let a = generate(&c);
        assert_eq!(a, generate(&c));
        assert_eq!(a.len(), 40);
        assert_ne!(a, generate(&SyntheticConfig { seed: 2, ..c }));
    }

    #[test]
    fn vocabulary_size_and_types() {
        let sentences = generate(&SyntheticConfig {
            sentences: 400,
            ..SyntheticConfig::default()
        });
        let words: BTreeSet<&String> = sentences.iter().flat_map(|s| &s.tokens_raw).collect();
        assert!((50..=70).contains(&words.len()), "{}", words.len());
        let types: BTreeSet<&String> = sentences.iter().flat_map(|s| s.gold.iter().map(|g| &g.label)).collect();
        assert_eq!(types.len(), 3);
    }
}
