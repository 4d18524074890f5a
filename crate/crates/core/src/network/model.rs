use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;

use super::{cross_entropy, Activation, Dropout, Mlp};
use crate::corpus::{LabelSet, Vocabularies};
use crate::error::{Error, Result};
use crate::features::{BlockInput, CnnTrace, Embeddings, FeatureConfig, FeatureLayout, FragmentInput, Table};

/// A trained (or trainable) fragment classifier: projections, network, the
/// label set and the feature configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub labels: LabelSet,
    pub features: FeatureConfig,
    pub embeddings: Embeddings,
    pub mlp: Mlp,
    /// Fingerprints of the cased, uncased and character vocabularies.
    pub vocab_fingerprints: [String; 3],
}

/// Gradients of the mean batch loss. Projection gradients are sparse: only
/// rows touched by the batch appear.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Array2<f64>>,
    pub rows: BTreeMap<(Table, usize), Array1<f64>>,
    /// One `count × height × char_dim` array per CNN group.
    pub kernels: Vec<Array3<f64>>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        labels: LabelSet,
        features: FeatureConfig,
        vocabs: &Vocabularies,
        hidden: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        features.validate()?;
        let sizes = [vocabs.cased.len(), vocabs.uncased.len(), vocabs.chars.len()];
        let embeddings = Embeddings::random(&features, sizes, rng);
        let width = features.layout().total_width;
        let mlp = Mlp::new(width, hidden, hidden_activation, labels.num_classes(), rng)?;
        Ok(Self {
            labels,
            features,
            embeddings,
            mlp,
            vocab_fingerprints: vocabs.fingerprints(),
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.features.layout()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        let width = self.layout().total_width;
        if self.mlp.input_dim() != width {
            return Err(Error::Invariant(format!(
                "network input {} does not match feature width {width}",
                self.mlp.input_dim()
            )));
        }
        if self.mlp.output_dim() != self.labels.num_classes() {
            return Err(Error::Invariant(format!(
                "network output {} does not match {} classes",
                self.mlp.output_dim(),
                self.labels.num_classes()
            )));
        }
        Ok(())
    }

    /// Fails unless `vocabs` are the vocabularies the model was trained with.
    pub fn check_vocabularies(&self, vocabs: &Vocabularies) -> Result<()> {
        let got = vocabs.fingerprints();
        for (i, name) in ["cased", "uncased", "chars"].iter().enumerate() {
            if got[i] != self.vocab_fingerprints[i] {
                return Err(Error::ModelLoad(format!(
                    "{name} vocabulary does not match the model (fingerprint {} vs {})",
                    &got[i][..12],
                    &self.vocab_fingerprints[i][..12.min(self.vocab_fingerprints[i].len())]
                )));
            }
        }
        Ok(())
    }

    /// Dense feature matrix for a batch, plus per-row CNN traces.
    pub fn project(&self, inputs: &[FragmentInput]) -> Result<(Array2<f64>, Vec<Option<CnnTrace>>)> {
        let layout = self.layout();
        let mut x = Array2::zeros((inputs.len(), layout.total_width));
        let mut traces = Vec::with_capacity(inputs.len());
        for (input, row) in inputs.iter().zip(x.rows_mut()) {
            traces.push(self.embeddings.project_into(&layout, input, row)?);
        }
        Ok((x, traces))
    }

    /// Class probabilities, one row per input.
    pub fn predict(&self, inputs: &[FragmentInput]) -> Result<Array2<f64>> {
        if inputs.is_empty() {
            return Ok(Array2::zeros((0, self.labels.num_classes())));
        }
        let (x, _) = self.project(inputs)?;
        self.mlp.forward(x.view())
    }

    pub fn loss(&self, inputs: &[FragmentInput], targets: &[usize]) -> Result<f64> {
        Ok(cross_entropy(self.predict(inputs)?.view(), targets))
    }

    /// Mean cross-entropy of the batch and its gradients with respect to every
    /// trainable parameter.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        inputs: &[FragmentInput],
        targets: &[usize],
        dropout: Dropout,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        if inputs.is_empty() {
            return Err(Error::NoData("empty batch".into()));
        }
        let (x, traces) = self.project(inputs)?;
        let trace = self.mlp.forward_train(x, dropout, rng)?;
        let loss = cross_entropy(trace.probs.view(), targets);
        let (layers, dx) = self.mlp.backward(&trace, targets)?;

        let mut grads = Gradients {
            layers,
            rows: BTreeMap::new(),
            kernels: self
                .embeddings
                .cnn
                .as_ref()
                .map(|c| c.groups.iter().map(|g| Array3::zeros(g.kernels.raw_dim())).collect())
                .unwrap_or_default(),
        };
        let layout = self.layout();
        for ((input, trace), d) in inputs.iter().zip(&traces).zip(dx.rows()) {
            for (seg, block) in layout.segments.iter().zip(&input.blocks) {
                let dseg = d.slice(s![seg.range()]);
                match block {
                    BlockInput::Sparse(code) => {
                        let table = seg.kind.table().expect("sparse blocks have a table");
                        if !self.embeddings.table(table).trainable {
                            continue;
                        }
                        for &(row, w) in code.entries() {
                            grads
                                .rows
                                .entry((table, row))
                                .or_insert_with(|| Array1::zeros(seg.width))
                                .scaled_add(w, &dseg);
                        }
                    }
                    BlockInput::Chars(chars) => {
                        let cnn = self.embeddings.cnn.as_ref().expect("CNN block implies kernels");
                        let tr = trace.as_ref().expect("CNN block yields a trace");
                        let mut char_rows = BTreeMap::new();
                        cnn.backward(
                            chars,
                            self.embeddings.chars.values.view(),
                            tr,
                            dseg,
                            &mut grads.kernels,
                            &mut char_rows,
                        );
                        if self.embeddings.chars.trainable {
                            for (row, g) in char_rows {
                                let acc = grads
                                    .rows
                                    .entry((Table::Chars, row))
                                    .or_insert_with(|| Array1::zeros(g.len()));
                                *acc += &g;
                            }
                        }
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    /// Plain SGD: every parameter moves by `-lr` times its gradient.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        self.mlp.apply(&grads.layers, lr);
        for (&(table, row), g) in &grads.rows {
            self.embeddings
                .table_mut(table)
                .values
                .row_mut(row)
                .scaled_add(-lr, g);
        }
        if let Some(cnn) = self.embeddings.cnn.as_mut() {
            for (group, g) in cnn.groups.iter_mut().zip(&grads.kernels) {
                group.kernels.scaled_add(-lr, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Sentence};
    use crate::features::{FeatureSelection, SentenceCodes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Model, Vec<FragmentInput>, Vocabularies) {
        let s = Sentence::new("d", "John lives in New York".split(' ').map(String::from).collect(), vec![]).unwrap();
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let features = FeatureConfig {
            selection: FeatureSelection::all(),
            word_dim: 3,
            char_dim: 2,
            cnn: crate::features::CnnConfig {
                groups: vec![(2, 2)],
                activation: Activation::Sigmoid,
            },
            ..FeatureConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(LabelSet::conll(), features.clone(), &vocabs, &[6], Activation::Relu, &mut rng).unwrap();
        let codes = SentenceCodes::new(&s, &vocabs, &features);
        let inputs = vec![codes.fragment(0, 1).unwrap(), codes.fragment(3, 5).unwrap()];
        (model, inputs, vocabs)
    }

    #[test]
    fn predictions_are_distributions() {
        let (model, inputs, _) = fixture();
        model.validate().unwrap();
        let p = model.predict(&inputs).unwrap();
        assert_eq!(p.dim(), (2, 5));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(model.predict(&[]).unwrap().nrows(), 0);
    }

    #[test]
    fn gradients_touch_only_used_rows() {
        let (model, inputs, vocabs) = fixture();
        let (_, g) = model
            .loss_and_gradients(&inputs, &[0, 1], Dropout::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let john = vocabs.cased.lookup("John");
        assert!(g.rows.contains_key(&(Table::Cased, john)));
        assert!(g.rows.keys().all(|(t, r)| *r < model.embeddings.table(*t).rows()));
        assert_eq!(g.kernels.len(), 1);
    }

    #[test]
    fn frozen_tables_get_no_gradient() {
        let (mut model, inputs, _) = fixture();
        model.embeddings.cased.trainable = false;
        let (_, g) = model
            .loss_and_gradients(&inputs, &[0, 1], Dropout::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(g.rows.keys().all(|(t, _)| *t != Table::Cased));
    }

    #[test]
    fn vocabulary_mismatch_is_reported() {
        let (model, _, vocabs) = fixture();
        model.check_vocabularies(&vocabs).unwrap();
        let other = Sentence::new("d", vec!["other".into()], vec![]).unwrap();
        let wrong = build_vocab(&[other], 1).unwrap();
        assert!(matches!(model.check_vocabularies(&wrong), Err(Error::ModelLoad(_))));
    }
}
