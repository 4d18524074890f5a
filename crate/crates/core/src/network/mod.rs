//! Feedforward classifier: fully connected layers with a bias row, sigmoid or
//! ReLU hidden units, a softmax output and mean cross-entropy loss.

mod gradcheck;
mod io;
mod model;
mod train;

pub use gradcheck::{gradcheck, gradcheck_suite, relative_error, GradcheckOptions, GradcheckReport};
pub use io::{load_model, read_model, save_model, write_model, MODEL_FILE, MODEL_FORMAT_VERSION};
pub use model::{Gradients, Model};
pub use train::{train, EpochLog, TrainSchedule, TrainingData};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Softmax,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            _ => Err(Error::InvalidParameter(format!(
                "unknown activation {name:?} (sigmoid, relu, softmax)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }

    /// Elementwise activation; softmax is row-wise and handled separately.
    pub fn apply_scalar(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Softmax => panic!("softmax is not elementwise"),
        }
    }

    pub fn derivative_from_input(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softmax => panic!("softmax derivative is folded into the loss"),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Mean negative log-likelihood of the targets.
pub fn cross_entropy(probs: ArrayView2<f64>, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / targets.len().max(1) as f64
}

/// Fully connected layer. `weights` has `in_dim + 1` rows; the last row holds
/// the bias (the weights of an always-one input).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = glorot_bound(in_dim, out_dim);
        let mut weights = Array2::zeros((in_dim + 1, out_dim));
        for w in weights.slice_mut(s![..in_dim, ..]).iter_mut() {
            // rejection keeps every draw strictly inside the open interval
            *w = loop {
                let v: f64 = rng.random_range(-bound..bound);
                if v > -bound {
                    break v;
                }
            };
        }
        Self { weights, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn pre_activation(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape {
                expected: format!("input width {}", self.in_dim()),
                got: format!("{}", x.ncols()),
            });
        }
        let n = self.in_dim();
        let mut z = x.dot(&self.weights.slice(s![..n, ..]));
        z += &self.weights.row(n);
        Ok(z)
    }

    pub fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Softmax => {
                let mut p = z.clone();
                softmax_rows(&mut p);
                p
            }
            act => z.mapv(|v| act.apply_scalar(v)),
        }
    }
}

pub fn glorot_bound(in_dim: usize, out_dim: usize) -> f64 {
    (6.0 / (in_dim + out_dim) as f64).sqrt()
}

/// Dropout applied during a training forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    /// Also drop units of the projected input vector.
    pub on_input: bool,
}

/// Intermediate values of a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer, after dropout.
    pub inputs: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    /// Scaled keep-masks (`0` or `1/(1-rate)`) per layer input; `None` when
    /// that input was not dropped.
    pub masks: Vec<Option<Array2<f64>>>,
    pub probs: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden_activation == Activation::Softmax {
            return Err(Error::InvalidParameter("hidden layers must be sigmoid or relu".into()));
        }
        if input_dim == 0 || outputs < 2 || hidden.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "bad network shape {input_dim} -> {hidden:?} -> {outputs}"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Softmax
                } else {
                    hidden_activation
                };
                Layer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Invariant("network has no layers".into()));
        };
        if last.activation != Activation::Softmax {
            return Err(Error::Invariant("final layer must be softmax".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Invariant(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
            if pair[0].activation == Activation::Softmax {
                return Err(Error::Invariant(format!("hidden layer {i} is softmax")));
            }
        }
        if self.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
            return Err(Error::Invariant("non-finite weight".into()));
        }
        Ok(())
    }

    /// Class probabilities, no dropout.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = layer.pre_activation(a.view())?;
            a = layer.activate(&z);
        }
        Ok(a)
    }

    pub fn forward_train<R: Rng + ?Sized>(&self, x: Array2<f64>, dropout: Dropout, rng: &mut R) -> Result<ForwardTrace> {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut a = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let drop_here = dropout.rate > 0.0 && (i > 0 || dropout.on_input);
            let mask = drop_here.then(|| {
                let keep = 1.0 - dropout.rate;
                Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                a *= m;
            }
            let z = layer.pre_activation(a.view())?;
            let next = layer.activate(&z);
            inputs.push(a);
            pre_activations.push(z);
            masks.push(mask);
            a = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            masks,
            probs: a,
        })
    }

    /// Mean cross-entropy gradients for every layer, plus the gradient with
    /// respect to the (pre-dropout) network input.
    pub fn backward(&self, trace: &ForwardTrace, targets: &[usize]) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        let batch = trace.probs.nrows();
        if targets.len() != batch {
            return Err(Error::Shape {
                expected: format!("{batch} targets"),
                got: format!("{}", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.output_dim()) {
            return Err(Error::InvalidParameter(format!("target class {t} out of range")));
        }
        let mut delta = trace.probs.clone();
        for (i, &t) in targets.iter().enumerate() {
            delta[[i, t]] -= 1.0;
        }
        delta /= batch as f64;

        let mut grads = vec![Array2::zeros((0, 0)); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let n = layer.in_dim();
            let mut g = Array2::zeros(layer.weights.raw_dim());
            g.slice_mut(s![..n, ..]).assign(&trace.inputs[l].t().dot(&delta));
            g.row_mut(n).assign(&delta.sum_axis(Axis(0)));
            grads[l] = g;

            let mut da = delta.dot(&layer.weights.slice(s![..n, ..]).t());
            if let Some(m) = &trace.masks[l] {
                da *= m;
            }
            if l == 0 {
                return Ok((grads, da));
            }
            let prev = &self.layers[l - 1];
            let z = &trace.pre_activations[l - 1];
            ndarray::Zip::from(&mut da)
                .and(z)
                .for_each(|d, &zv| *d *= prev.activation.derivative_from_input(zv));
            delta = da;
        }
        unreachable!("network has at least one layer")
    }

    pub fn apply(&mut self, grads: &[Array2<f64>], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(-lr, g);
        }
    }
}

/// Row-wise argmax with ties going to the lower class id.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &p) in row.iter().enumerate() {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_softmax_layer_is_uniform() {
        let mlp = Mlp {
            layers: vec![Layer {
                weights: Array2::zeros((4, 3)),
                activation: Activation::Softmax,
            }],
        };
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 - 1.5);
        let p = mlp.forward(x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn relu_negative_preactivations() {
        let mut layer = Layer::glorot(2, 3, Activation::Relu, &mut rng());
        layer.weights.fill(1.0);
        layer.weights.row_mut(2).fill(-10.0);
        let z = layer.pre_activation(Array2::ones((1, 2)).view()).unwrap();
        assert!(layer.activate(&z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_matches_straight_line_oracle() {
        let mut r = rng();
        let mlp = Mlp::new(3, &[4], Activation::Sigmoid, 2, &mut r).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let p = mlp.forward(x.view()).unwrap();
        let (w0, w1) = (&mlp.layers[0].weights, &mlp.layers[1].weights);
        for b in 0..3 {
            let mut h = [0.0; 4];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut z = w0[[3, j]];
                for i in 0..3 {
                    z += x[[b, i]] * w0[[i, j]];
                }
                *hj = 1.0 / (1.0 + (-z).exp());
            }
            let mut logits = [0.0; 2];
            for (k, lk) in logits.iter_mut().enumerate() {
                *lk = w1[[4, k]] + (0..4).map(|j| h[j] * w1[[j, k]]).sum::<f64>();
            }
            let norm: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..2 {
                assert!((p[[b, k]] - logits[k].exp() / norm).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_error() {
        let mlp = Mlp::new(3, &[4], Activation::Relu, 2, &mut rng()).unwrap();
        assert!(matches!(mlp.forward(Array2::zeros((1, 2)).view()), Err(Error::Shape { .. })));
    }

    #[test]
    fn glorot_bounds_strict() {
        let mut r = rng();
        for (i, o) in [(1, 1), (5, 3), (64, 512)] {
            let layer = Layer::glorot(i, o, Activation::Relu, &mut r);
            let b = glorot_bound(i, o);
            assert!(layer.weights.slice(s![..i, ..]).iter().all(|w| w.abs() < b));
            assert!(layer.weights.row(i).iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn output_delta_is_p_minus_onehot() {
        let mlp = Mlp::new(2, &[], Activation::Relu, 3, &mut rng()).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        let trace = mlp.forward_train(x.clone(), Dropout::default(), &mut rng()).unwrap();
        let (grads, _) = mlp.backward(&trace, &[1]).unwrap();
        let mut expected = trace.probs.row(0).to_owned();
        expected[1] -= 1.0;
        // bias row gradient is exactly the output delta
        assert_eq!(grads[0].row(2), expected);
    }

    #[test]
    fn duplicate_example_same_gradient() {
        let mlp = Mlp::new(3, &[4], Activation::Sigmoid, 3, &mut rng()).unwrap();
        let one = Array2::from_shape_vec((1, 3), vec![0.1, 0.2, -0.3]).unwrap();
        let two = ndarray::concatenate![Axis(0), one, one];
        let g1 = mlp.backward(&mlp.forward_train(one.clone(), Dropout::default(), &mut rng()).unwrap(), &[2]).unwrap();
        let g2 = mlp.backward(&mlp.forward_train(two, Dropout::default(), &mut rng()).unwrap(), &[2, 2]).unwrap();
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-15));
        }
    }

    #[test]
    fn train_and_eval_forward_agree_without_dropout() {
        let mlp = Mlp::new(4, &[8, 8], Activation::Relu, 3, &mut rng()).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let eval = mlp.forward(x.view()).unwrap();
        let train = mlp.forward_train(x.clone(), Dropout::default(), &mut rng()).unwrap();
        assert_eq!(eval, train.probs);
        let dropped = mlp
            .forward_train(x, Dropout { rate: 0.5, on_input: false }, &mut rng())
            .unwrap();
        assert_ne!(eval, dropped.probs);
        assert!(dropped.masks[0].is_none());
    }

    #[test]
    fn sgd_edge_cases() {
        let mut mlp = Mlp::new(3, &[2], Activation::Relu, 2, &mut rng()).unwrap();
        let before = mlp.clone();
        let zeros: Vec<_> = mlp.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect();
        mlp.apply(&zeros, 0.5);
        assert_eq!(mlp, before);
        let same: Vec<_> = mlp.layers.iter().map(|l| l.weights.clone()).collect();
        mlp.apply(&same, 1.0);
        assert!(mlp.layers.iter().all(|l| l.weights.iter().all(|&w| w == 0.0)));
    }

    #[test]
    fn convex_step_decreases_loss() {
        let mut mlp = Mlp::new(3, &[], Activation::Relu, 3, &mut rng()).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let targets = [0, 1, 2, 0, 1, 2];
        let trace = mlp.forward_train(x.clone(), Dropout::default(), &mut rng()).unwrap();
        let before = cross_entropy(trace.probs.view(), &targets);
        let (g, _) = mlp.backward(&trace, &targets).unwrap();
        mlp.apply(&g, 0.05);
        let after = cross_entropy(mlp.forward(x.view()).unwrap().view(), &targets);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn invalid_targets() {
        let mlp = Mlp::new(2, &[], Activation::Relu, 2, &mut rng()).unwrap();
        let trace = mlp.forward_train(Array2::zeros((1, 2)), Dropout::default(), &mut rng()).unwrap();
        assert!(mlp.backward(&trace, &[2]).is_err());
        assert!(mlp.backward(&trace, &[0, 1]).is_err());
    }
}
