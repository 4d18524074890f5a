//! Training examples drawn from a labeled corpus.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{LabelSet, Sentence, Vocabularies};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FragmentInput, SentenceCodes};
use crate::fragments::{downsample, label_sentence, LabeledFragment, Relation, SamplingConfig};
use crate::network::TrainingData;

/// All fragments of a corpus with their targets. Each epoch keeps every exact
/// match and a fresh sample of negatives.
pub struct FragmentDataset<'a> {
    sentences: &'a [Sentence],
    vocabs: &'a Vocabularies,
    features: FeatureConfig,
    labeled: Vec<LabeledFragment>,
    sampling: SamplingConfig,
}

impl<'a> FragmentDataset<'a> {
    pub fn new(
        sentences: &'a [Sentence],
        vocabs: &'a Vocabularies,
        features: &FeatureConfig,
        labels: &LabelSet,
        max_span: usize,
        sampling: SamplingConfig,
    ) -> Result<Self> {
        if max_span == 0 {
            return Err(Error::InvalidParameter("max span must be positive".into()));
        }
        let labeled = sentences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| label_sentence(i, s, max_span, labels))
            .collect();
        Ok(Self {
            sentences,
            vocabs,
            features: features.clone(),
            labeled,
            sampling,
        })
    }

    pub fn fragments(&self) -> &[LabeledFragment] {
        &self.labeled
    }

    pub fn count(&self, relation: Relation) -> usize {
        self.labeled.iter().filter(|l| l.relation == relation).count()
    }
}

impl TrainingData for FragmentDataset<'_> {
    type Item = LabeledFragment;

    fn epoch_items(&self, _epoch: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledFragment> {
        downsample(&self.labeled, &self.sampling, rng)
    }

    fn materialize(&self, item: &LabeledFragment) -> Result<(FragmentInput, usize)> {
        let f = item.fragment;
        let codes = SentenceCodes::new(&self.sentences[f.sentence_id], self.vocabs, &self.features);
        Ok((codes.fragment(f.start, f.end)?, item.target))
    }
}
