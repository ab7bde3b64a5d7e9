//! The fixed networks an attack differentiates through: classifiers, the
//! layered style-mixing generator, the linear-Gaussian oracle generator and
//! the discriminator, with their desk-scale training loops.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{BlockReader, Checkpoint, ParamBlock};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp, Optimizer, Parameterized};
use crate::rng::{normal, normal_tensor, Rng};
use crate::tasks::LabeledDataset;

/// A differentiable `log p(y | x)` over batches of inputs.
pub trait Likelihood: Sync {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// Per-row `log p(y | x)` for an `n x input_dim` batch; returns a length-`n` vector.
    fn log_likelihood(&self, tape: &mut Tape, x: Var, y: usize) -> Result<Var>;
}

/// A generator mapping codes to observations, optionally through `L`
/// per-layer codes.
pub trait CodeGenerator: Sync {
    /// Dimension of one (per-layer) code.
    fn code_dim(&self) -> usize;
    fn layers(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn noise_std(&self) -> f64;
    /// `G(z)`: every layer is driven by the same code.
    fn generate_on(&self, tape: &mut Tape, z: Var) -> Result<Var>;
    /// `S({f(z_l)})`: one code per layer.
    fn synthesize_on(&self, tape: &mut Tape, codes: &[Var]) -> Result<Var>;

    fn generate(&self, z: &Tensor) -> Result<Tensor> {
        check_codes(z, self.code_dim(), "generate")?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x = self.generate_on(&mut tape, zv)?;
        Ok(tape.value(x).clone())
    }
}

fn check_codes(z: &Tensor, dim: usize, op: &'static str) -> Result<()> {
    if z.shape().len() != 2 || z.cols() != dim {
        return Err(shape_err(op, format!("codes {:?} for code dim {dim}", z.shape())));
    }
    Ok(())
}

fn check_input(x: &Tensor, dim: usize, op: &'static str) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dim {
        return Err(shape_err(op, format!("input {:?} for input dim {dim}", x.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classifier

/// Softmax classifier over a tanh MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    net: Mlp,
}

impl Classifier {
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("classifier needs >= 2 classes, got {classes}")));
        }
        let sizes: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([classes]).collect();
        Ok(Classifier { net: Mlp::new(&sizes, Activation::Tanh, rng)? })
    }

    /// All weights zero: predicts the uniform distribution everywhere.
    pub fn zeros(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([classes]).collect();
        Ok(Classifier { net: Mlp::zeros(&sizes, Activation::Tanh)? })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_dim() < 2 {
            return Err(Error::InvalidArgument("classifier needs >= 2 outputs".into()));
        }
        Ok(Classifier { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn feature_dim(&self) -> usize {
        let sizes = self.net.sizes();
        sizes[sizes.len() - 2]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim(), "classify")?;
        self.net.forward_values(x)
    }

    /// Class probabilities, one simplex row per input row.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let c = logits.cols();
        let mut out = Vec::with_capacity(logits.len());
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        Tensor::matrix(logits.rows(), c, out)
    }

    /// Arg-max labels; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Penultimate-layer activations.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim(), "features")?;
        let mut tape = Tape::new();
        let b = self.net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = b.penultimate(&mut tape, xv)?;
        Ok(tape.value(h).clone())
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let pred = self.predict(&data.features())?;
        let correct = pred.iter().zip(data.labels()).filter(|(p, y)| **p == **y as usize).count();
        Ok(correct as f64 / data.len() as f64)
    }

    fn cross_entropy_on(&self, tape: &mut Tape, bound: &BoundMlp, x: Tensor, labels: &[usize]) -> Result<Var> {
        let xv = tape.constant(x);
        let logits = bound.forward(tape, xv)?;
        let lp = tape.softmax_log_prob(logits, labels)?;
        let m = tape.mean(lp)?;
        tape.scale(m, -1.0)
    }

    pub fn cross_entropy(&self, data: &LabeledDataset) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let labels: Vec<usize> = data.labels().iter().map(|&l| l as usize).collect();
        let v = self.cross_entropy_on(&mut tape, &b, data.features(), &labels)?;
        Ok(tape.value(v).item())
    }
}

impl Likelihood for Classifier {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn classes(&self) -> usize {
        self.net.output_dim()
    }

    fn log_likelihood(&self, tape: &mut Tape, x: Var, y: usize) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(shape_err("log_likelihood", format!("input {shape:?} for classifier dim {}", self.input_dim())));
        }
        if y >= self.classes() {
            return Err(Error::InvalidArgument(format!("class {y} out of range for {} classes", self.classes())));
        }
        let b = self.bind(tape, false);
        let logits = b.forward(tape, x)?;
        tape.softmax_log_prob(logits, &vec![y; shape[0]])
    }
}

impl Parameterized for Classifier {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl Checkpoint for Classifier {
    const TAG: &'static str = "classifier";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        self.net.to_blocks("net")
    }

    fn from_blocks(reader: &BlockReader) -> Result<Self> {
        Classifier::from_mlp(Mlp::from_blocks("net", reader)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub validation_fraction: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            hidden: vec![32, 32],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingLog {
    /// Training-set cross-entropy before the first epoch and after each epoch.
    pub train_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

/// Minibatch SGD with momentum on the softmax cross-entropy.
pub fn train_classifier(
    data: &LabeledDataset,
    hp: &ClassifierTraining,
    rng: &mut Rng,
) -> Result<(Classifier, TrainingLog)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut distinct: Vec<u16> = data.labels().to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || data.classes() < 2 {
        return Err(Error::DegenerateLabels);
    }
    if hp.batch_size == 0 || !(0.0..1.0).contains(&hp.validation_fraction) {
        return Err(Error::InvalidArgument("batch_size must be >= 1 and validation_fraction in [0, 1)".into()));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_val = ((data.len() as f64) * hp.validation_fraction).floor() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train = data.subset(train_idx);
    let val = (n_val > 0).then(|| data.subset(val_idx));

    let mut clf = Classifier::new(data.dim(), &hp.hidden, data.classes(), rng)?;
    let mut opt = Optimizer::sgd(hp.learning_rate, hp.momentum);
    let mut train_loss = vec![clf.cross_entropy(&train)?];
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hp.epochs {
        idx.shuffle(rng);
        for batch in idx.chunks(hp.batch_size) {
            let b = train.subset(batch);
            let labels: Vec<usize> = b.labels().iter().map(|&l| l as usize).collect();
            let mut tape = Tape::new();
            let bound = clf.bind(&mut tape, true);
            let loss = clf
                .cross_entropy_on(&mut tape, &bound, b.features(), &labels)
                .map_err(|e| Error::Diverged { step: epoch, detail: e.to_string() })?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
            opt.step(clf.parameters_mut(), &g);
        }
        let l = clf.cross_entropy(&train)?;
        if !l.is_finite() {
            return Err(Error::Diverged { step: epoch, detail: "training loss".into() });
        }
        train_loss.push(l);
    }
    let log = TrainingLog {
        train_loss,
        train_accuracy: clf.accuracy(&train)?,
        validation_accuracy: val.map(|v| clf.accuracy(&v)).transpose()?,
    };
    Ok((clf, log))
}

// ---------------------------------------------------------------------------
// Generators

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub code_dim: usize,
    pub style_dim: usize,
    pub mapping_hidden: Vec<usize>,
    pub layers: usize,
    pub width: usize,
    pub output_dim: usize,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            code_dim: 8,
            style_dim: 8,
            mapping_hidden: vec![32, 32],
            layers: 4,
            width: 32,
            output_dim: 16,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SynthesisLayer {
    weight: Tensor,
    bias: Tensor,
    style: Tensor,
}

/// Mapping network `f: z -> w` followed by an `L`-layer synthesis network
/// that takes one style vector per layer.
///
/// Layer `l` computes `h_l = tanh(h_{l-1} W_l + b_l + w_l A_l)`, starting
/// from a learned constant `h_0`; the output is affine in `h_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredGenerator {
    mapping: Mlp,
    start: Tensor,
    layers: Vec<SynthesisLayer>,
    out_weight: Tensor,
    out_bias: Tensor,
    noise_std: f64,
}

/// Generator tensors on a tape.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    mapping: BoundMlp,
    start: Var,
    layers: Vec<(Var, Var, Var)>,
    out_weight: Var,
    out_bias: Var,
}

/// Inputs to [`LayeredGenerator::synthesize`]: either codes (mapped through
/// `f` per layer) or styles fed to the synthesis network directly.
#[derive(Clone, Copy, Debug)]
pub enum StyleInput<'a> {
    Codes(&'a [Tensor]),
    Styles(&'a [Tensor]),
}

fn init(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Tensor::new_unchecked(vec![rows, cols], data)
}

impl LayeredGenerator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.code_dim == 0 || cfg.style_dim == 0 || cfg.width == 0 || cfg.output_dim == 0 {
            return Err(Error::InvalidArgument(format!("bad generator config {cfg:?}")));
        }
        if !(cfg.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        let mut sizes = vec![cfg.code_dim];
        sizes.extend(&cfg.mapping_hidden);
        sizes.push(cfg.style_dim);
        let mapping = Mlp::new(&sizes, Activation::Tanh, rng)?;
        let w = cfg.width;
        let start = Tensor::new_unchecked(vec![w], (0..w).map(|_| normal(rng)).collect());
        let layers = (0..cfg.layers)
            .map(|_| SynthesisLayer {
                weight: init(rng, w, w, 1.0 / (w as f64).sqrt()),
                bias: Tensor::zeros(vec![w]),
                style: init(rng, cfg.style_dim, w, 1.0 / (cfg.style_dim as f64).sqrt()),
            })
            .collect();
        Ok(LayeredGenerator {
            mapping,
            start,
            layers,
            out_weight: init(rng, w, cfg.output_dim, 1.0 / (w as f64).sqrt()),
            out_bias: Tensor::zeros(vec![cfg.output_dim]),
            noise_std: cfg.noise_std,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.mapping.output_dim()
    }

    pub fn set_noise_std(&mut self, s: f64) {
        self.noise_std = s;
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGenerator {
        let mapping = self.mapping.bind(tape, trainable);
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let start = put(&self.start);
        let layers = self.layers.iter().map(|l| (put(&l.weight), put(&l.bias), put(&l.style))).collect();
        let out_weight = put(&self.out_weight);
        let out_bias = put(&self.out_bias);
        BoundGenerator { mapping, start, layers, out_weight, out_bias }
    }

    /// Styles from codes: `f(z)`.
    pub fn map_on(&self, tape: &mut Tape, bound: &BoundGenerator, z: Var) -> Result<Var> {
        bound.mapping.forward(tape, z)
    }

    pub fn synthesize_styles_on(&self, tape: &mut Tape, bound: &BoundGenerator, styles: &[Var]) -> Result<Var> {
        if styles.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "synthesis takes {} styles, got {}",
                self.layers.len(),
                styles.len()
            )));
        }
        let n = tape.value(styles[0]).rows();
        let zeros = tape.constant(Tensor::zeros(vec![n, self.start.len()]));
        let mut h = tape.add_row(zeros, bound.start)?;
        for (&(w, b, a), &s) in bound.layers.iter().zip(styles) {
            let lin = tape.matmul(h, w)?;
            let lin = tape.add_row(lin, b)?;
            let inj = tape.matmul(s, a)?;
            let pre = tape.add(lin, inj)?;
            h = tape.tanh(pre)?;
        }
        let out = tape.matmul(h, bound.out_weight)?;
        tape.add_row(out, bound.out_bias)
    }

    pub fn generate_bound(&self, tape: &mut Tape, bound: &BoundGenerator, z: Var) -> Result<Var> {
        let w = self.map_on(tape, bound, z)?;
        let styles = vec![w; self.layers.len()];
        self.synthesize_styles_on(tape, bound, &styles)
    }

    pub fn synthesize_bound(&self, tape: &mut Tape, bound: &BoundGenerator, codes: &[Var]) -> Result<Var> {
        if codes.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "synthesis takes {} codes, got {}",
                self.layers.len(),
                codes.len()
            )));
        }
        let styles = codes.iter().map(|&z| self.map_on(tape, bound, z)).collect::<Result<Vec<_>>>()?;
        self.synthesize_styles_on(tape, bound, &styles)
    }

    /// Runs the synthesis network on per-layer inputs. With `noise = None`
    /// the observation noise is treated as zero.
    pub fn synthesize(&self, input: StyleInput<'_>, noise: Option<&Tensor>) -> Result<Tensor> {
        let (vecs, expected) = match input {
            StyleInput::Codes(c) => (c, self.code_dim()),
            StyleInput::Styles(s) => (s, self.style_dim()),
        };
        if vecs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "synthesis takes {} layer inputs, got {}",
                self.layers.len(),
                vecs.len()
            )));
        }
        let n = vecs[0].rows();
        for v in vecs {
            if v.shape().len() != 2 || v.cols() != expected || v.rows() != n {
                return Err(shape_err("synthesize", format!("layer input {:?}, expected [{n}, {expected}]", v.shape())));
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vars: Vec<Var> = vecs.iter().map(|v| tape.constant(v.clone())).collect();
        let x = match input {
            StyleInput::Codes(_) => self.synthesize_bound(&mut tape, &bound, &vars)?,
            StyleInput::Styles(_) => self.synthesize_styles_on(&mut tape, &bound, &vars)?,
        };
        add_observation_noise(tape.value(x).clone(), self.noise_std, noise)
    }

    /// Styles `f(z)` as plain values.
    pub fn map(&self, z: &Tensor) -> Result<Tensor> {
        check_codes(z, self.code_dim(), "map")?;
        self.mapping.forward_values(z)
    }
}

fn add_observation_noise(x: Tensor, sigma: f64, noise: Option<&Tensor>) -> Result<Tensor> {
    match noise {
        None => Ok(x),
        Some(eps) => {
            if eps.shape() != x.shape() {
                return Err(shape_err("observation noise", format!("{:?} vs {:?}", eps.shape(), x.shape())));
            }
            let data = x.data().iter().zip(eps.data()).map(|(a, e)| a + sigma * e).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}

impl CodeGenerator for LayeredGenerator {
    fn code_dim(&self) -> usize {
        self.mapping.input_dim()
    }

    fn layers(&self) -> usize {
        self.layers.len()
    }

    fn output_dim(&self) -> usize {
        self.out_bias.len()
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn generate_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let b = self.bind(tape, false);
        self.generate_bound(tape, &b, z)
    }

    fn synthesize_on(&self, tape: &mut Tape, codes: &[Var]) -> Result<Var> {
        let b = self.bind(tape, false);
        self.synthesize_bound(tape, &b, codes)
    }
}

impl Parameterized for LayeredGenerator {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.mapping.parameters();
        out.push(&self.start);
        for l in &self.layers {
            out.extend([&l.weight, &l.bias, &l.style]);
        }
        out.extend([&self.out_weight, &self.out_bias]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.mapping.parameters_mut();
        out.push(&mut self.start);
        for l in &mut self.layers {
            out.extend([&mut l.weight, &mut l.bias, &mut l.style]);
        }
        out.extend([&mut self.out_weight, &mut self.out_bias]);
        out
    }
}

impl BoundGenerator {
    /// Vars in [`Parameterized::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.mapping.vars();
        out.push(self.start);
        for &(w, b, a) in &self.layers {
            out.extend([w, b, a]);
        }
        out.extend([self.out_weight, self.out_bias]);
        out
    }
}

impl Checkpoint for LayeredGenerator {
    const TAG: &'static str = "layered_generator";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        let mut out = self.mapping.to_blocks("mapping");
        out.push(ParamBlock::new(
            "synthesis.shape",
            vec![self.layers.len() as f64, self.start.len() as f64, self.out_bias.len() as f64],
        ));
        out.push(ParamBlock::new("noise_std", vec![self.noise_std]));
        out.push(ParamBlock::new("synthesis.start", self.start.data().to_vec()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(ParamBlock::new(format!("synthesis.{i}.weight"), l.weight.data().to_vec()));
            out.push(ParamBlock::new(format!("synthesis.{i}.bias"), l.bias.data().to_vec()));
            out.push(ParamBlock::new(format!("synthesis.{i}.style"), l.style.data().to_vec()));
        }
        out.push(ParamBlock::new("output.weight", self.out_weight.data().to_vec()));
        out.push(ParamBlock::new("output.bias", self.out_bias.data().to_vec()));
        out
    }

    fn from_blocks(r: &BlockReader) -> Result<Self> {
        let mapping = Mlp::from_blocks("mapping", r)?;
        let shape = r.indices("synthesis.shape")?;
        let [count, width, out_dim] = shape[..] else {
            return Err(Error::Corrupt("synthesis.shape".into()));
        };
        let sd = mapping.output_dim();
        let layers = (0..count)
            .map(|i| {
                Ok(SynthesisLayer {
                    weight: r.tensor(&format!("synthesis.{i}.weight"), vec![width, width])?,
                    bias: r.tensor(&format!("synthesis.{i}.bias"), vec![width])?,
                    style: r.tensor(&format!("synthesis.{i}.style"), vec![sd, width])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LayeredGenerator {
            mapping,
            start: r.tensor("synthesis.start", vec![width])?,
            layers,
            out_weight: r.tensor("output.weight", vec![width, out_dim])?,
            out_bias: r.tensor("output.bias", vec![out_dim])?,
            noise_std: r.scalar("noise_std")?,
        })
    }
}

/// `x = A z + b + sigma * eps` with `A` of full column rank.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianGenerator {
    a_t: Tensor,
    bias: Tensor,
    noise_std: f64,
}

impl LinearGaussianGenerator {
    /// `a` is `d x k`, row-major.
    pub fn new(a: &Tensor, b: Vec<f64>, noise_std: f64) -> Result<Self> {
        if a.shape().len() != 2 || a.rows() != b.len() {
            return Err(shape_err("linear_gaussian", format!("A {:?} with b of length {}", a.shape(), b.len())));
        }
        let (d, k) = (a.rows(), a.cols());
        if k > d {
            return Err(Error::InvalidArgument(format!("code dim {k} exceeds output dim {d}")));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        let m = DMatrix::from_row_slice(d, k, a.data());
        let smallest = m.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
        if !(smallest > 1e-8) {
            return Err(Error::InvalidArgument(format!("A is rank deficient (smallest singular value {smallest:e})")));
        }
        let mut a_t = vec![0.0; d * k];
        for i in 0..d {
            for j in 0..k {
                a_t[j * d + i] = a.at(i, j);
            }
        }
        Ok(LinearGaussianGenerator {
            a_t: Tensor::matrix(k, d, a_t)?,
            bias: Tensor::vector(b)?,
            noise_std,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        LinearGaussianGenerator::new(&Tensor::matrix(dim, dim, a).unwrap(), vec![0.0; dim], 0.0).unwrap()
    }

    /// `A` as a `d x k` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.a_t.rows(), self.a_t.cols(), self.a_t.data()).transpose()
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.data()
    }

    /// Moments of `x` when `z ~ N(mean, cov)`: `(A mean + b, A cov A^T + sigma^2 I)`.
    pub fn pushforward(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let a = self.matrix();
        let mu = &a * mean + DVector::from_column_slice(self.bias.data());
        let d = a.nrows();
        let sigma = &a * cov * a.transpose() + DMatrix::identity(d, d) * self.noise_std.powi(2);
        (mu, sigma)
    }

    /// `G(z) + sigma * eps`, or `G(z)` when `noise` is `None`.
    pub fn sample(&self, z: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        add_observation_noise(self.generate(z)?, self.noise_std, noise)
    }
}

impl CodeGenerator for LinearGaussianGenerator {
    fn code_dim(&self) -> usize {
        self.a_t.rows()
    }

    fn layers(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn generate_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let a = tape.constant(self.a_t.clone());
        let b = tape.constant(self.bias.clone());
        let x = tape.matmul(z, a)?;
        tape.add_row(x, b)
    }

    fn synthesize_on(&self, tape: &mut Tape, codes: &[Var]) -> Result<Var> {
        match codes {
            [z] => self.generate_on(tape, *z),
            _ => Err(Error::InvalidArgument(format!("linear generator takes 1 code, got {}", codes.len()))),
        }
    }
}

impl Checkpoint for LinearGaussianGenerator {
    const TAG: &'static str = "linear_gaussian_generator";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new("shape", vec![self.a_t.cols() as f64, self.a_t.rows() as f64]),
            ParamBlock::new("a_transposed", self.a_t.data().to_vec()),
            ParamBlock::new("bias", self.bias.data().to_vec()),
            ParamBlock::new("noise_std", vec![self.noise_std]),
        ]
    }

    fn from_blocks(r: &BlockReader) -> Result<Self> {
        let shape = r.indices("shape")?;
        let [d, k] = shape[..] else {
            return Err(Error::Corrupt("shape".into()));
        };
        let a_t = r.tensor("a_transposed", vec![k, d])?;
        let mut a = vec![0.0; d * k];
        for j in 0..k {
            for i in 0..d {
                a[i * k + j] = a_t.at(j, i);
            }
        }
        LinearGaussianGenerator::new(&Tensor::matrix(d, k, a)?, r.get("bias")?.to_vec(), r.scalar("noise_std")?)
    }
}

/// Either generator kind behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyGenerator {
    Linear(LinearGaussianGenerator),
    Layered(LayeredGenerator),
}

impl CodeGenerator for AnyGenerator {
    fn code_dim(&self) -> usize {
        match self {
            AnyGenerator::Linear(g) => g.code_dim(),
            AnyGenerator::Layered(g) => g.code_dim(),
        }
    }

    fn layers(&self) -> usize {
        match self {
            AnyGenerator::Linear(g) => g.layers(),
            AnyGenerator::Layered(g) => g.layers(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            AnyGenerator::Linear(g) => g.output_dim(),
            AnyGenerator::Layered(g) => g.output_dim(),
        }
    }

    fn noise_std(&self) -> f64 {
        match self {
            AnyGenerator::Linear(g) => g.noise_std(),
            AnyGenerator::Layered(g) => g.noise_std(),
        }
    }

    fn generate_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self {
            AnyGenerator::Linear(g) => g.generate_on(tape, z),
            AnyGenerator::Layered(g) => g.generate_on(tape, z),
        }
    }

    fn synthesize_on(&self, tape: &mut Tape, codes: &[Var]) -> Result<Var> {
        match self {
            AnyGenerator::Linear(g) => g.synthesize_on(tape, codes),
            AnyGenerator::Layered(g) => g.synthesize_on(tape, codes),
        }
    }
}

impl AnyGenerator {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyGenerator::Linear(g) => crate::checkpoint::to_bytes(g),
            AnyGenerator::Layered(g) => crate::checkpoint::to_bytes(g),
        }
    }

    /// Decodes whichever generator kind the checkpoint's tag names.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tag, blocks) = crate::checkpoint::decode(bytes)?;
        let reader = BlockReader::new(blocks);
        match tag.as_str() {
            LinearGaussianGenerator::TAG => Ok(AnyGenerator::Linear(LinearGaussianGenerator::from_blocks(&reader)?)),
            LayeredGenerator::TAG => Ok(AnyGenerator::Layered(LayeredGenerator::from_blocks(&reader)?)),
            _ => Err(Error::TypeTag { expected: "generator".into(), found: tag }),
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator and GAN training

/// MLP emitting one real logit per input row.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    net: Mlp,
}

impl Discriminator {
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([1]).collect();
        Ok(Discriminator { net: Mlp::new(&sizes, Activation::Tanh, rng)? })
    }

    /// Logit identically zero (`sigmoid = 1/2` everywhere).
    pub fn constant_zero(input_dim: usize) -> Self {
        Discriminator { net: Mlp::zeros(&[input_dim, 1], Activation::Tanh).unwrap() }
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(shape_err("discriminator", format!("output dim {}", net.output_dim())));
        }
        Ok(Discriminator { net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    /// Logits on the tape, as an `n x 1` matrix.
    pub fn logit_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let b = self.bind(tape, false);
        b.forward(tape, x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim(), "discriminate")?;
        self.net.forward_values(x)
    }
}

impl Parameterized for Discriminator {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl Checkpoint for Discriminator {
    const TAG: &'static str = "discriminator";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        self.net.to_blocks("net")
    }

    fn from_blocks(reader: &BlockReader) -> Result<Self> {
        Discriminator::from_mlp(Mlp::from_blocks("net", reader)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTraining {
    pub generator: GeneratorConfig,
    pub discriminator_hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
}

impl Default for GanTraining {
    fn default() -> Self {
        GanTraining {
            generator: GeneratorConfig::default(),
            discriminator_hidden: vec![32, 32],
            steps: 1500,
            batch_size: 64,
            generator_lr: 2e-3,
            discriminator_lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GanLog {
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
}

/// Non-saturating GAN on the auxiliary data: the discriminator minimizes
/// `-log s(D(x)) - log s(-D(G(z)))`, the generator `-log s(D(G(z)))`.
pub fn train_gan(aux: &LabeledDataset, hp: &GanTraining, rng: &mut Rng) -> Result<(LayeredGenerator, Discriminator, GanLog)> {
    if aux.is_empty() {
        return Err(Error::InvalidArgument("cannot train a GAN on an empty dataset".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut cfg = hp.generator.clone();
    cfg.output_dim = aux.dim();
    let mut gen = LayeredGenerator::new(&cfg, rng)?;
    let mut disc = Discriminator::new(aux.dim(), &hp.discriminator_hidden, rng)?;
    let kind = crate::nn::OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 };
    let mut opt_g = Optimizer::new(kind, hp.generator_lr);
    let mut opt_d = Optimizer::new(kind, hp.discriminator_lr);
    let mut log = GanLog::default();
    let all = aux.features();
    let k = gen.code_dim();
    let diverged = |step: usize| move |e: Error| Error::Diverged { step, detail: e.to_string() };

    for step in 0..hp.steps {
        let idx: Vec<usize> = (0..hp.batch_size).map(|_| rand::Rng::random_range(rng, 0..aux.len())).collect();
        let real: Vec<f64> = idx.iter().flat_map(|&i| all.row(i).to_vec()).collect();
        let real = Tensor::matrix(hp.batch_size, aux.dim(), real)?;

        let z = normal_tensor(rng, vec![hp.batch_size, k]);
        let fake = gen.generate(&z).map_err(diverged(step))?;
        let d = discriminator_step(&mut disc, &mut opt_d, real, fake).map_err(diverged(step))?;
        log.discriminator_loss.push(d);

        // generator step
        let z = normal_tensor(rng, vec![hp.batch_size, k]);
        let mut tape = Tape::new();
        let bg = gen.bind(&mut tape, true);
        let g_loss = (|| {
            let zv = tape.constant(z);
            let x = gen.generate_bound(&mut tape, &bg, zv)?;
            let l = disc.logit_on(&mut tape, x)?;
            let ls = tape.log_sigmoid(l)?;
            let m = tape.mean(ls)?;
            tape.scale(m, -1.0)
        })()
        .map_err(diverged(step))?;
        let grads = tape.backward(g_loss)?;
        let g: Vec<Tensor> = bg.vars().into_iter().map(|v| grads.wrt(v)).collect();
        log.generator_loss.push(tape.value(g_loss).item());
        opt_g.step(gen.parameters_mut(), &g);
    }
    Ok((gen, disc, log))
}

fn discriminator_step(disc: &mut Discriminator, opt: &mut Optimizer, real: Tensor, fake: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bd = disc.bind(&mut tape, true);
    let xr = tape.constant(real);
    let xf = tape.constant(fake);
    let lr = bd.forward(&mut tape, xr)?;
    let lf = bd.forward(&mut tape, xf)?;
    let a = tape.log_sigmoid(lr)?;
    let nf = tape.scale(lf, -1.0)?;
    let b = tape.log_sigmoid(nf)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    let loss = tape.scale(m, -1.0)?;
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = bd.vars().into_iter().map(|v| grads.wrt(v)).collect();
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { context: "discriminator gradient".into() });
    }
    opt.step(disc.parameters_mut(), &g);
    Ok(tape.value(loss).item())
}

/// Trains only a discriminator to tell `data` from samples of a frozen
/// `generator` (codes `N(0, I)`), with the same loss as [`train_gan`].
pub fn train_discriminator(
    data: &LabeledDataset,
    generator: &dyn CodeGenerator,
    hidden: &[usize],
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(Discriminator, Vec<f64>)> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("need a non-empty dataset and batch_size >= 1".into()));
    }
    if generator.output_dim() != data.dim() {
        return Err(shape_err("train_discriminator", format!("generator emits {} dims, data has {}", generator.output_dim(), data.dim())));
    }
    let mut disc = Discriminator::new(data.dim(), hidden, rng)?;
    let mut opt = Optimizer::new(crate::nn::OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 }, lr);
    let all = data.features();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let real: Vec<f64> = (0..batch_size)
            .flat_map(|_| all.row(rand::Rng::random_range(rng, 0..data.len())).to_vec())
            .collect();
        let real = Tensor::matrix(batch_size, data.dim(), real)?;
        let z = normal_tensor(rng, vec![batch_size, generator.code_dim()]);
        let fake = generator.generate(&z)?;
        let loss = discriminator_step(&mut disc, &mut opt, real, fake)
            .map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
        losses.push(loss);
    }
    Ok((disc, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::checkpoint::{from_bytes, to_bytes};
    use crate::rng::seeded;
    use crate::tasks::Split;

    fn blobs(n: usize, sep: f64, rng: &mut Rng) -> LabeledDataset {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { -sep } else { sep };
            x.push(center + 0.3 * normal(rng));
            x.push(0.3 * normal(rng));
            y.push(c as u16);
        }
        LabeledDataset::from_f64(&x, 2, y, 2, Split::PrivateTrain).unwrap()
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let clf = Classifier::zeros(3, &[4], 5).unwrap();
        let p = clf.classify(&normal_tensor(&mut seeded(1), vec![7, 3])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_saturation() {
        let w = Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let clf = Classifier::from_mlp(Mlp::from_layers(vec![(w, b)], Activation::Tanh).unwrap()).unwrap();
        let p = clf.classify(&Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let expect = 1.0 / (1.0 + 20f64.exp());
        assert!((p.data()[1] - expect).abs() < 1e-20);
        assert!((p.data()[1] - 2.06e-9).abs() < 1e-11);
        assert!(p.data()[0] > 0.999_999_99);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = seeded(2);
        let clf = Classifier::new(4, &[8, 8], 6, &mut rng).unwrap();
        let x = normal_tensor(&mut rng, vec![1000, 4]);
        let p = clf.classify(&x).unwrap();
        for i in 0..1000 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9 && p.row(i).iter().all(|&v| v >= 0.0));
        }
        assert!(clf.classify(&normal_tensor(&mut rng, vec![2, 5])).is_err());
    }

    #[test]
    fn train_on_separable_blobs() {
        let mut rng = seeded(3);
        let data = blobs(400, 2.0, &mut rng);
        let hp = ClassifierTraining { validation_fraction: 0.25, epochs: 10, ..Default::default() };
        let (_, log) = train_classifier(&data, &hp, &mut rng).unwrap();
        assert!(log.validation_accuracy.unwrap() >= 0.99, "{log:?}");
        assert!(log.train_loss.last().unwrap() < log.train_loss.first().unwrap());
        assert_eq!(log.train_loss.len(), 11);
    }

    #[test]
    fn training_errors_and_zero_epochs() {
        let mut rng = seeded(4);
        let single = LabeledDataset::from_f64(&[0.0, 1.0, 2.0, 3.0], 2, vec![1, 1], 2, Split::PrivateTrain).unwrap();
        let err = train_classifier(&single, &ClassifierTraining::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("degenerate labels"));

        let data = blobs(20, 2.0, &mut rng);
        let hp = ClassifierTraining { epochs: 0, validation_fraction: 0.0, ..Default::default() };
        let (clf, log) = train_classifier(&data, &hp, &mut seeded(5)).unwrap();
        let mut r = seeded(5);
        let mut order: Vec<usize> = (0..20).collect();
        order.shuffle(&mut r);
        let fresh = Classifier::new(2, &hp.hidden, 2, &mut r).unwrap();
        assert_eq!(clf, fresh);
        assert_eq!(log.train_loss.len(), 1);
    }

    fn small_generator(seed: u64) -> LayeredGenerator {
        let cfg = GeneratorConfig { code_dim: 3, style_dim: 4, mapping_hidden: vec![8], layers: 4, width: 6, output_dim: 5, noise_std: 0.0 };
        LayeredGenerator::new(&cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn copy_styles_equals_plain_path() {
        let g = small_generator(6);
        let z = normal_tensor(&mut seeded(7), vec![5, 3]);
        let plain = g.generate(&z).unwrap();
        let w = g.map(&z).unwrap();
        let styles = vec![w; 4];
        let mixed = g.synthesize(StyleInput::Styles(&styles), None).unwrap();
        assert_eq!(plain, mixed);
        let codes = vec![z.clone(); 4];
        assert_eq!(g.synthesize(StyleInput::Codes(&codes), None).unwrap(), plain);
    }

    #[test]
    fn style_mixing_boundary_and_layer_count() {
        let g = small_generator(8);
        let mut rng = seeded(9);
        let w1 = g.map(&normal_tensor(&mut rng, vec![2, 3])).unwrap();
        let w2 = g.map(&normal_tensor(&mut rng, vec![2, 3])).unwrap();
        let all_first = g.synthesize(StyleInput::Styles(&vec![w1.clone(); 4]), None).unwrap();
        let l0 = 4;
        let mixed: Vec<Tensor> = (0..4).map(|l| if l < l0 { w1.clone() } else { w2.clone() }).collect();
        assert_eq!(g.synthesize(StyleInput::Styles(&mixed), None).unwrap(), all_first);
        let half: Vec<Tensor> = (0..4).map(|l| if l < 2 { w1.clone() } else { w2.clone() }).collect();
        assert_ne!(g.synthesize(StyleInput::Styles(&half), None).unwrap(), all_first);
        assert!(g.synthesize(StyleInput::Styles(&mixed[..3]), None).is_err());
    }

    #[test]
    fn linear_generator_cases() {
        let id = LinearGaussianGenerator::identity(3);
        let z = normal_tensor(&mut seeded(10), vec![4, 3]);
        assert_eq!(id.generate(&z).unwrap(), z);
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let g = LinearGaussianGenerator::new(&a, vec![0.5, -1.0], 0.0).unwrap();
        assert_eq!(g.generate(&Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap().data(), &[0.5, -1.0]);
        let rank_def = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(LinearGaussianGenerator::new(&rank_def, vec![0.0; 2], 0.0).is_err());
        let wide = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(LinearGaussianGenerator::new(&wide, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn linear_pushforward_scalar() {
        let g = LinearGaussianGenerator::new(&Tensor::matrix(1, 1, vec![2.0]).unwrap(), vec![1.0], 0.0).unwrap();
        let (m, c) = g.pushforward(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1));
        assert_eq!(m[0], 1.0);
        assert_eq!(c[(0, 0)], 4.0);
    }

    #[test]
    fn observation_noise_variance() {
        let g = LinearGaussianGenerator::new(&Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(), vec![0.0, 0.0], 0.1).unwrap();
        let mut rng = seeded(11);
        let n = 20_000;
        let z = Tensor::matrix(n, 1, vec![0.7; n]).unwrap();
        let eps = normal_tensor(&mut rng, vec![n, 2]);
        let x = g.sample(&z, Some(&eps)).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| x.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            // sample variance of a normal has standard error var*sqrt(2/(n-1))
            let se = 0.01 * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((var - 0.01).abs() < 4.0 * se, "{var}");
        }
    }

    #[test]
    fn classify_through_synthesize_gradient() {
        let g = small_generator(12);
        let clf = Classifier::new(5, &[7], 3, &mut seeded(13)).unwrap();
        let mut rng = seeded(14);
        for _ in 0..20 {
            let p = normal_tensor(&mut rng, vec![2, 12]);
            let err = finite_diff_check(
                |t, x| {
                    let codes: Vec<Var> = (0..4).map(|l| t.slice_cols(x, 3 * l, 3 * l + 3)).collect::<Result<_>>()?;
                    let out = g.synthesize_on(t, &codes)?;
                    let ll = clf.log_likelihood(t, out, 1)?;
                    t.sum(ll)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn gan_smoke_and_errors() {
        let mut rng = seeded(15);
        let x: Vec<f64> = (0..200).map(|_| normal(&mut rng)).collect();
        let aux = LabeledDataset::from_f64(&x, 2, vec![0; 100], 1, Split::Auxiliary).unwrap();
        let hp = GanTraining {
            generator: GeneratorConfig { code_dim: 2, style_dim: 2, mapping_hidden: vec![8], layers: 2, width: 8, output_dim: 2, noise_std: 0.0 },
            discriminator_hidden: vec![8],
            steps: 1,
            ..Default::default()
        };
        let (g, d, log) = train_gan(&aux, &hp, &mut seeded(16)).unwrap();
        let mut r = seeded(16);
        let mut cfg = hp.generator.clone();
        cfg.output_dim = 2;
        let g0 = LayeredGenerator::new(&cfg, &mut r).unwrap();
        let d0 = Discriminator::new(2, &hp.discriminator_hidden, &mut r).unwrap();
        assert_ne!(g, g0);
        assert_ne!(d, d0);
        assert!(log.discriminator_loss[0].is_finite());

        let empty = LabeledDataset::empty(2, 1, Split::Auxiliary);
        assert!(train_gan(&empty, &hp, &mut rng).is_err());
    }

    #[test]
    fn gan_matches_data_mean() {
        let mut rng = seeded(17);
        let n = 2000;
        let mut x = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (a, b) = (normal(&mut rng), normal(&mut rng));
            x.push(1.5 * a + 0.5 * b + 2.0);
            x.push(-0.5 * a + 0.8 * b - 1.0);
        }
        let aux = LabeledDataset::from_f64(&x, 2, vec![0; n], 1, Split::Auxiliary).unwrap();
        let hp = GanTraining {
            generator: GeneratorConfig { code_dim: 2, style_dim: 4, mapping_hidden: vec![16], layers: 2, width: 16, output_dim: 2, noise_std: 0.0 },
            discriminator_hidden: vec![16, 16],
            ..Default::default()
        };
        let (g, _, _) = train_gan(&aux, &hp, &mut seeded(18)).unwrap();
        let samples = g.generate(&normal_tensor(&mut rng, vec![4000, 2])).unwrap();
        let data_mean = [2.0, -1.0];
        for j in 0..2 {
            let m = (0..4000).map(|i| samples.at(i, j)).sum::<f64>() / 4000.0;
            assert!((m - data_mean[j]).abs() < 0.5, "coordinate {j}: {m}");
        }
    }

    #[test]
    fn discriminator_separates_shifted_data() {
        let mut rng = seeded(22);
        let x: Vec<f64> = (0..500).map(|_| 3.0 + normal(&mut rng)).collect();
        let data = LabeledDataset::from_f64(&x, 1, vec![0; 500], 1, Split::Auxiliary).unwrap();
        let gen = LinearGaussianGenerator::identity(1);
        let (d, losses) = train_discriminator(&data, &gen, &[8], 300, 64, 1e-2, &mut rng).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let l = d.logits(&Tensor::matrix(2, 1, vec![3.0, -3.0]).unwrap()).unwrap();
        assert!(l.data()[0] > 0.0 && l.data()[1] < 0.0, "{:?}", l.data());
        assert!(train_discriminator(&data, &LinearGaussianGenerator::identity(2), &[8], 1, 8, 1e-2, &mut rng).is_err());
    }

    #[test]
    fn checkpoints_round_trip_and_tags() {
        let clf = Classifier::new(3, &[4], 2, &mut seeded(19)).unwrap();
        let bytes = to_bytes(&clf);
        assert_eq!(from_bytes::<Classifier>(&bytes).unwrap(), clf);
        assert!(matches!(from_bytes::<LayeredGenerator>(&bytes), Err(Error::TypeTag { .. })));
        assert!(matches!(AnyGenerator::from_bytes(&bytes), Err(Error::TypeTag { .. })));
        let g = small_generator(20);
        assert_eq!(from_bytes::<LayeredGenerator>(&to_bytes(&g)).unwrap(), g);
        let lin = LinearGaussianGenerator::new(&Tensor::matrix(3, 2, vec![1.0, 0.0, 0.5, 1.0, 0.0, 2.0]).unwrap(), vec![0.1, 0.2, 0.3], 0.05).unwrap();
        assert_eq!(AnyGenerator::from_bytes(&to_bytes(&lin)).unwrap(), AnyGenerator::Linear(lin));
        let d = Discriminator::new(3, &[5], &mut seeded(21)).unwrap();
        assert_eq!(from_bytes::<Discriminator>(&to_bytes(&d)).unwrap(), d);
    }
}
