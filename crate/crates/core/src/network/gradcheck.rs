//! Central finite-difference check of analytic gradients.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, Dropout, Gradients, Model};
use crate::corpus::{build_vocab, LabelSet, Sentence};
use crate::error::Result;
use crate::features::{CnnConfig, FeatureConfig, FeatureSelection, FragmentInput, SentenceCodes, Table};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Perturbs one analytic gradient entry before comparing, so that the
    /// check itself can be shown to fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter with the largest relative error.
    pub worst: String,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

enum Param {
    Layer(usize, usize, usize),
    Row(Table, usize, usize),
    Kernel(usize, usize, usize, usize),
}

impl Param {
    fn describe(&self) -> String {
        match self {
            Param::Layer(l, i, j) => format!("layer {l} W[{i},{j}]"),
            Param::Row(t, r, c) => format!("{} row {r} col {c}", t.name()),
            Param::Kernel(g, n, a, d) => format!("cnn group {g} kernel {n} [{a},{d}]"),
        }
    }

    fn value_mut<'m>(&self, model: &'m mut Model) -> &'m mut f64 {
        match *self {
            Param::Layer(l, i, j) => &mut model.mlp.layers[l].weights[[i, j]],
            Param::Row(t, r, c) => &mut model.embeddings.table_mut(t).values[[r, c]],
            Param::Kernel(g, n, a, d) => {
                &mut model.embeddings.cnn.as_mut().expect("kernels").groups[g].kernels[[n, a, d]]
            }
        }
    }

    fn analytic(&self, grads: &Gradients) -> f64 {
        match *self {
            Param::Layer(l, i, j) => grads.layers[l][[i, j]],
            Param::Row(t, r, c) => grads.rows.get(&(t, r)).map_or(0.0, |g: &Array1<f64>| g[c]),
            Param::Kernel(g, n, a, d) => grads.kernels[g][[n, a, d]],
        }
    }
}

/// Compares analytic gradients of the mean batch loss against central
/// differences for every layer weight, every element of each projection row
/// the batch touches, and every CNN kernel weight.
pub fn gradcheck(
    name: &str,
    model: &Model,
    inputs: &[FragmentInput],
    targets: &[usize],
    options: GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, mut grads) = model.loss_and_gradients(inputs, targets, Dropout::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if options.corrupt {
        grads.layers[0][[0, 0]] += 1.0;
    }

    let mut params = Vec::new();
    for (l, layer) in model.mlp.layers.iter().enumerate() {
        for ((i, j), _) in layer.weights.indexed_iter() {
            params.push(Param::Layer(l, i, j));
        }
    }
    for (&(t, r), g) in &grads.rows {
        for c in 0..g.len() {
            params.push(Param::Row(t, r, c));
        }
    }
    if let Some(cnn) = &model.embeddings.cnn {
        for (g, group) in cnn.groups.iter().enumerate() {
            for ((n, a, d), _) in group.kernels.indexed_iter() {
                params.push(Param::Kernel(g, n, a, d));
            }
        }
    }

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for p in &params {
        let original = *p.value_mut(&mut probe);
        *p.value_mut(&mut probe) = original + options.eps;
        let plus = probe.loss(inputs, targets)?;
        *p.value_mut(&mut probe) = original - options.eps;
        let minus = probe.loss(inputs, targets)?;
        *p.value_mut(&mut probe) = original;
        let numeric = (plus - minus) / (2.0 * options.eps);
        let err = relative_error(p.analytic(&grads), numeric);
        if err > max_rel || worst.is_empty() {
            max_rel = max_rel.max(err);
            worst = p.describe();
        }
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        checked: params.len(),
        max_rel_error: max_rel,
        worst,
        passed: max_rel < options.tolerance,
    })
}

const SUITE_TEXT: [&str; 3] = [
    "Ann Lee flew from Oslo to Rome on Monday",
    "the Acme board met in Paris",
    "Bo and Cy visited Acme Labs",
];

/// Desk-scale gradient checks: a 5-5-3 network over word projections with
/// sigmoid and ReLU hidden units, and a network over character FOFE and CNN
/// features. Each uses 4 random fragments with random targets.
pub fn gradcheck_suite(seed: u64, options: GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    let sentences: Vec<Sentence> = SUITE_TEXT
        .iter()
        .map(|t| Sentence::new("gc", t.split(' ').map(String::from).collect(), vec![]))
        .collect::<Result<_>>()?;
    let vocabs = build_vocab(&sentences, 1)?;
    let labels = LabelSet::new(["PER", "LOC"])?;
    let word = FeatureConfig {
        selection: FeatureSelection::parse("cased.left_incl")?,
        word_dim: 5,
        ..FeatureConfig::default()
    };
    let mixed = FeatureConfig {
        selection: FeatureSelection::parse("uncased.bow,uncased.right_excl,char.fofe,char.cnn")?,
        word_dim: 2,
        char_dim: 3,
        cnn: CnnConfig {
            groups: vec![(2, 2), (3, 2)],
            activation: Activation::Sigmoid,
        },
        ..FeatureConfig::default()
    };
    let cases = [
        ("5-5-3 sigmoid + projection rows", word.clone(), Activation::Sigmoid),
        ("5-5-3 relu + projection rows", word, Activation::Relu),
        ("char fofe + cnn + projection rows", mixed, Activation::Sigmoid),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, features, act) in cases {
        let model = Model::new(labels.clone(), features.clone(), &vocabs, &[5], act, &mut rng)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..4 {
            let s = &sentences[rng.random_range(0..sentences.len())];
            let start = rng.random_range(0..s.len());
            let end = rng.random_range(start + 1..=s.len().min(start + 3));
            inputs.push(SentenceCodes::new(s, &vocabs, &features).fragment(start, end)?);
            targets.push(rng.random_range(0..labels.num_classes()));
        }
        reports.push(gradcheck(name, &model, &inputs, &targets, options)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in gradcheck_suite(11, GradcheckOptions::default()).unwrap() {
            assert!(r.passed, "{} max rel {} at {}", r.name, r.max_rel_error, r.worst);
            assert!(r.checked > 40);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradcheckOptions {
            corrupt: true,
            ..GradcheckOptions::default()
        };
        assert!(gradcheck_suite(11, opts).unwrap().iter().all(|r| !r.passed));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
