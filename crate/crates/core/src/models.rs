//! Small fully-connected classifiers.
//!
//! Parameters are laid out layer by layer as `w{k}` (`in x out`, row-major)
//! followed by `b{k}` (`out`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchObjective, Graph, NodeId, Real, SampleLoss, SampleObjective};
use crate::error::{check_dim, Error, Result};
use crate::tensor::{Layout, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropySoftmax,
    /// Summed squared error against one-hot targets.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width, hidden widths, then the number of classes.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            widths,
            activation,
            seed,
        }
    }

    /// The default desk-scale shape `[input, 128, 128, classes]`.
    pub fn desk_scale(input: usize, classes: usize, activation: Activation, seed: u64) -> Self {
        Self::new(vec![input, 128, 128, classes], activation, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::contract("a model needs at least input and output widths"));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::contract(format!("layer {i} has zero width")));
        }
        if self.classes() < 2 {
            return Err(Error::contract("at least two output classes are required"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// `sum over layers of (w_in * w_out + w_out)`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::new();
        for (k, w) in self.widths.windows(2).enumerate() {
            layout.push(format!("w{k}"), vec![w[0], w[1]]);
            layout.push(format!("b{k}"), vec![w[1]]);
        }
        layout
    }
}

/// Fan-in scaled Gaussian weights `N(0, 2 / fan_in)` and zero biases.
pub fn init_model(spec: &ModelSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout();
    let mut values = Vec::with_capacity(layout.dim());
    for w in spec.widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values, layout)
}

/// A multilayer perceptron paired with its training loss.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: ModelSpec,
    loss: LossKind,
    // (w offset, b offset, fan_in, fan_out) per layer
    layers: Vec<(usize, usize, usize, usize)>,
    dim: usize,
}

impl Mlp {
    pub fn new(spec: ModelSpec, loss: LossKind) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in spec.widths.windows(2) {
            let w_off = offset;
            offset += w[0] * w[1];
            let b_off = offset;
            offset += w[1];
            layers.push((w_off, b_off, w[0], w[1]));
        }
        Ok(Self {
            spec,
            loss,
            layers,
            dim: offset,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: &[f64], rows: usize) -> Result<NodeId> {
        check_dim("model input", rows * self.spec.input_dim(), x.len())?;
        let mut h = g.constant(rows, self.spec.input_dim(), x)?;
        let last = self.layers.len() - 1;
        for (k, &(w_off, b_off, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let w = g.param(w_off, fan_in, fan_out)?;
            let b = g.param(b_off, 1, fan_out)?;
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = if k == last {
                z
            } else {
                match self.spec.activation {
                    Activation::Relu => g.relu(z)?,
                    Activation::Tanh => g.tanh(z)?,
                }
            };
        }
        Ok(h)
    }

    fn attach_loss<T: Real>(&self, g: &mut Graph<'_, T>, logits: NodeId, y: &[usize]) -> Result<NodeId> {
        let k = self.spec.classes();
        if let Some(&bad) = y.iter().find(|&&label| label >= k) {
            return Err(Error::contract(format!("label {bad} out of range [0, {k})")));
        }
        match self.loss {
            LossKind::CrossEntropySoftmax => g.softmax_cross_entropy(logits, y),
            LossKind::Mse => {
                let mut target = vec![0.0; y.len() * k];
                for (i, &label) in y.iter().enumerate() {
                    target[i * k + label] = 1.0;
                }
                g.squared_error(logits, &target)
            }
        }
    }

    /// Logits for every row of `x`, shape `rows x classes`.
    pub fn logits(&self, theta: &[f64], x: &Tensor) -> Result<Tensor> {
        check_dim("model params", self.dim, theta.len())?;
        let mut g = Graph::new(theta);
        let out = self.forward(&mut g, x.data(), x.rows())?;
        Tensor::new(vec![x.rows(), self.spec.classes()], g.value(out).to_vec())
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, theta: &[f64], x: &Tensor, y: &[usize]) -> Result<f64> {
        check_dim("accuracy labels", x.rows(), y.len())?;
        if y.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(theta, x)?;
        let k = self.spec.classes();
        let correct = y
            .iter()
            .enumerate()
            .filter(|&(i, &label)| {
                let row = &logits.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best == label
            })
            .count();
        Ok(correct as f64 / y.len() as f64)
    }

    /// `theta -> L(theta, x, y)` for a single sample.
    pub fn sample_loss<'a>(&'a self, x: &'a [f64], y: usize) -> Result<SampleObjective<'a, Self>> {
        check_dim("sample features", self.spec.input_dim(), x.len())?;
        if y >= self.spec.classes() {
            return Err(Error::contract(format!(
                "label {y} out of range [0, {})",
                self.spec.classes()
            )));
        }
        Ok(SampleObjective { loss: self, x, y })
    }

    /// `theta -> (1/l) sum_i L(theta, x_i, y_i)`.
    pub fn batch_loss<'a>(&'a self, x: &'a Tensor, y: &'a [usize]) -> Result<BatchObjective<'a, Self>> {
        check_dim("batch labels", x.rows(), y.len())?;
        Ok(BatchObjective { loss: self, x, y })
    }
}

impl SampleLoss for Mlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn build_sample<T: Real>(&self, g: &mut Graph<'_, T>, x: &[f64], y: usize) -> Result<NodeId> {
        let logits = self.forward(g, x, 1)?;
        self.attach_loss(g, logits, &[y])
    }

    fn build_batch<T: Real>(&self, g: &mut Graph<'_, T>, x: &Tensor, y: &[usize]) -> Result<NodeId> {
        let logits = self.forward(g, x.data(), x.rows())?;
        self.attach_loss(g, logits, y)
    }
}

/// Convenience constructor mirroring `make_loss(spec, kind, sample)`.
pub fn make_loss(spec: &ModelSpec, kind: LossKind) -> Result<Mlp> {
    Mlp::new(spec.clone(), kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, value};

    #[test]
    fn param_count_matches_layout() {
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Tanh, 0);
        assert_eq!(spec.param_count(), 17);
        let theta = init_model(&spec).unwrap();
        assert_eq!(theta.dim(), 17);
        assert_eq!(theta.block_values("b0").unwrap(), &[0.0; 3]);
    }

    #[test]
    fn linear_model_is_allowed() {
        let spec = ModelSpec::new(vec![4, 3], Activation::Relu, 0);
        assert_eq!(init_model(&spec).unwrap().dim(), 15);
    }

    #[test]
    fn invalid_specs_rejected() {
        for widths in [vec![2, 0, 2], vec![3], vec![3, 1]] {
            let spec = ModelSpec::new(widths, Activation::Relu, 0);
            assert!(matches!(init_model(&spec), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&ModelSpec::new(vec![5, 7, 3], Activation::Tanh, 11)).unwrap();
        let b = init_model(&ModelSpec::new(vec![5, 7, 3], Activation::Tanh, 11)).unwrap();
        let c = init_model(&ModelSpec::new(vec![5, 7, 3], Activation::Tanh, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        // All-zero parameters make every logit zero.
        let spec = ModelSpec::new(vec![3, 4, 5], Activation::Tanh, 0);
        let mlp = Mlp::new(spec, LossKind::CrossEntropySoftmax).unwrap();
        let theta = vec![0.0; mlp.dim()];
        let x = [0.3, -1.0, 2.0];
        let l = value(&mlp.sample_loss(&x, 2).unwrap(), &theta).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_correct_margin_gives_vanishing_loss() {
        // Linear model whose bias favours class 1 by a wide margin.
        let spec = ModelSpec::new(vec![1, 2], Activation::Relu, 0);
        let mlp = Mlp::new(spec, LossKind::CrossEntropySoftmax).unwrap();
        let theta = [0.0, 0.0, 0.0, 60.0];
        let l = value(&mlp.sample_loss(&[1.0], 1).unwrap(), &theta).unwrap();
        assert!((0.0..1e-25).contains(&l));
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let spec = ModelSpec::new(vec![2, 3], Activation::Relu, 0);
        let mlp = Mlp::new(spec, LossKind::CrossEntropySoftmax).unwrap();
        assert!(matches!(mlp.sample_loss(&[0.0, 0.0], 3), Err(Error::Contract(_))));
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let theta = vec![0.0; mlp.dim()];
        let y = [7];
        assert!(grad(&mlp.batch_loss(&x, &y).unwrap(), &theta).is_err());
    }

    #[test]
    fn mse_zero_at_exact_fit() {
        let spec = ModelSpec::new(vec![1, 2], Activation::Relu, 0);
        let mlp = Mlp::new(spec, LossKind::Mse).unwrap();
        // logits = (0, 1) for label 1
        let theta = [0.0, 0.0, 0.0, 1.0];
        let l = value(&mlp.sample_loss(&[3.0], 1).unwrap(), &theta).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn accuracy_counts_argmax() {
        let spec = ModelSpec::new(vec![1, 2], Activation::Relu, 0);
        let mlp = Mlp::new(spec, LossKind::CrossEntropySoftmax).unwrap();
        // logit_1 - logit_0 = x
        let theta = [-0.5, 0.5, 0.0, 0.0];
        let x = Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![2.0]]).unwrap();
        let acc = mlp.accuracy(&theta, &x, &[1, 0, 0]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }
}
