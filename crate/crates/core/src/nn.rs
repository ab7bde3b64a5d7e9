//! Dense networks and first-order optimizers shared by every model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{BlockReader, ParamBlock};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Elu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Elu => tape.elu(x),
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Elu => 1.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Elu),
            _ => Err(Error::Corrupt(format!("unknown activation code {c}"))),
        }
    }
}

/// Anything with trainable tensors, in a fixed order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}

/// Fully connected network: affine layers with `activation` between them
/// and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// An [`Mlp`] whose tensors have been placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
    activation: Activation,
}

impl Mlp {
    /// `sizes` lists input, hidden and output widths. Weights are drawn from
    /// `N(0, 1/fan_in)`, biases start at zero.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            let data = (0..w[0] * w[1]).map(|_| scale * normal(rng)).collect();
            weights.push(Tensor::new_unchecked(vec![w[0], w[1]], data));
            biases.push(Tensor::zeros(vec![w[1]]));
        }
        Ok(Mlp { weights, biases, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let weights = sizes.windows(2).map(|w| Tensor::zeros(vec![w[0], w[1]])).collect();
        let biases = sizes[1..].iter().map(|&s| Tensor::zeros(vec![s])).collect();
        Ok(Mlp { weights, biases, activation })
    }

    /// Builds from explicit `(weight, bias)` pairs, weight shaped `in x out`.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one layer".into()));
        }
        let mut prev = None;
        for (w, b) in &layers {
            if w.shape().len() != 2 || b.len() != w.cols() || prev.is_some_and(|p| p != w.rows()) {
                return Err(shape_err("mlp", format!("layer {:?} / {:?}", w.shape(), b.shape())));
            }
            prev = Some(w.cols());
        }
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        for (w, b) in layers {
            biases.push(b.reshape(vec![w.cols()])?);
            weights.push(w);
        }
        Ok(Mlp { weights, biases, activation })
    }

    /// Zeroes the output layer so the network computes the constant 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last] = Tensor::zeros_like(&self.weights[last]);
        self.biases[last] = Tensor::zeros_like(&self.biases[last]);
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.weights.iter().map(Tensor::cols)).collect()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.weights[i], &self.biases[i])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let weights = self.weights.iter().map(&mut put).collect();
        let biases = self.biases.iter().map(&mut put).collect();
        BoundMlp { weights, biases, activation: self.activation }
    }

    /// Evaluates on `n x in` rows without keeping the tape.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        let mut arch: Vec<f64> = self.sizes().iter().map(|&s| s as f64).collect();
        arch.push(self.activation.code());
        let mut blocks = vec![ParamBlock::new(format!("{prefix}.arch"), arch)];
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            blocks.push(ParamBlock::new(format!("{prefix}.{i}.weight"), w.data().to_vec()));
            blocks.push(ParamBlock::new(format!("{prefix}.{i}.bias"), b.data().to_vec()));
        }
        blocks
    }

    pub fn from_blocks(prefix: &str, reader: &BlockReader) -> Result<Self> {
        let arch = reader.get(&format!("{prefix}.arch"))?;
        if arch.len() < 3 {
            return Err(Error::Corrupt(format!("{prefix}.arch too short")));
        }
        let activation = Activation::from_code(arch[arch.len() - 1])?;
        let sizes: Vec<usize> = arch[..arch.len() - 1].iter().map(|&s| s as usize).collect();
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let weight = reader.tensor(&format!("{prefix}.{i}.weight"), vec![w[0], w[1]])?;
            let bias = reader.tensor(&format!("{prefix}.{i}.bias"), vec![w[1]])?;
            layers.push((weight, bias));
        }
        Mlp::from_layers(layers, activation)
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let h = self.hidden_upto(tape, x, last)?;
        let y = tape.matmul(h, self.weights[last])?;
        tape.add_row(y, self.biases[last])
    }

    /// Activations feeding the output layer.
    pub fn penultimate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.hidden_upto(tape, x, self.weights.len() - 1)
    }

    fn hidden_upto(&self, tape: &mut Tape, x: Var, layers: usize) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            let a = tape.matmul(h, self.weights[i])?;
            let a = tape.add_row(a, self.biases[i])?;
            h = self.activation.apply(tape, a)?;
        }
        Ok(h)
    }

    /// Vars in [`Parameterized::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    /// Swaps in `var` for the parameter at `index` (parameter order).
    pub fn with_var(mut self, index: usize, var: Var) -> Self {
        let slot = if index % 2 == 0 { &mut self.weights[index / 2] } else { &mut self.biases[index / 2] };
        *slot = var;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 }
    }
}

/// Adaptive-moment or momentum descent over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, first: Vec::new(), second: Vec::new(), t: 0 }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::default(), lr)
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd { momentum }, lr)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Descends along `grads`; `params` and `grads` are matched by position.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2 } => {
                    let v = &mut self.second[k];
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for i in 0..data.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..data.len() {
                        m[i] = momentum * m[i] + g.data()[i];
                        data[i] -= self.lr * m[i];
                    }
                }
            }
        }
    }
}
