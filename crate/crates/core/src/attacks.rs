//! Attack objectives and the loops that minimize them.
//!
//! The VMI objective for a family `q` over generator codes is
//! `E_q[-log p(y | G(z))] + gamma * KL(q || N(0, I))`; the layered form feeds
//! one code per synthesis layer and averages the per-layer KL terms. The two
//! point-estimate baselines and a conjugate quadratic task with a closed-form
//! power posterior live here too.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{shape_err, Error, Result};
use crate::models::{CodeGenerator, Discriminator, Likelihood};
use crate::nn::{Optimizer, OptimizerKind, Parameterized};
use crate::rng::{normal, normal_tensor, stream, Rng};
use crate::variational::{
    standard_normal_log_prob, BoundFamily, CouplingFlow, Estimate, Family, FlowConfig, GaussianFamily,
    LayeredVariational,
};

// ---------------------------------------------------------------------------
// Quadratic logit task

/// Classifier-like likelihood whose class-`c` logit is
/// `-1/2 z^T H_c z + b_c^T z + c_c`.
///
/// With `normalized` set, `log_likelihood` is the softmax log-probability;
/// otherwise it returns the raw class logit, i.e. an unnormalized
/// log-likelihood whose power posterior is Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLogitTask {
    h: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    c: Vec<f64>,
    normalized: bool,
}

impl QuadraticLogitTask {
    pub fn new(h: Vec<DMatrix<f64>>, b: Vec<DVector<f64>>, c: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.len() != b.len() || h.len() != c.len() {
            return Err(Error::InvalidArgument("H, b and c need one entry per class".into()));
        }
        let k = b[0].len();
        for (hc, bc) in h.iter().zip(&b) {
            if hc.nrows() != k || hc.ncols() != k || bc.len() != k {
                return Err(shape_err("quadratic_task", format!("H {}x{} with b of length {}", hc.nrows(), hc.ncols(), bc.len())));
            }
            if (hc - hc.transpose()).abs().max() > 1e-12 {
                return Err(Error::InvalidArgument("H must be symmetric".into()));
            }
            let min_eig = hc.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-12 {
                return Err(Error::InvalidArgument(format!("H must be PSD (smallest eigenvalue {min_eig:e})")));
            }
        }
        Ok(QuadraticLogitTask { h, b, c, normalized: true })
    }

    /// Random task with `H_c = M M^T / k + 0.5 I` and unit-scale `b_c`.
    pub fn random(k: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        for _ in 0..classes {
            let m = DMatrix::from_fn(k, k, |_, _| normal(rng));
            let hc = &m * m.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5;
            h.push((&hc + hc.transpose()) * 0.5);
            b.push(DVector::from_fn(k, |_, _| normal(rng)));
            c.push(normal(rng));
        }
        QuadraticLogitTask::new(h, b, c).unwrap()
    }

    /// Single-class unnormalized task with diagonal `H` (entries in
    /// `[0.5, 2]`) and `b ~ N(0, I)`, so the power posterior factorizes and a
    /// diagonal Gaussian family contains it exactly.
    pub fn conjugate(k: usize, rng: &mut Rng) -> Self {
        let diag = DVector::from_fn(k, |_, _| 0.5 + 1.5 * rand::Rng::random::<f64>(rng));
        let b = DVector::from_fn(k, |_, _| normal(rng));
        QuadraticLogitTask::new(vec![DMatrix::from_diagonal(&diag)], vec![b], vec![0.0]).unwrap().unnormalized()
    }

    /// The same task with the softmax normalizer suppressed.
    pub fn unnormalized(&self) -> Self {
        QuadraticLogitTask { normalized: false, ..self.clone() }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn h(&self, y: usize) -> &DMatrix<f64> {
        &self.h[y]
    }

    pub fn b(&self, y: usize) -> &DVector<f64> {
        &self.b[y]
    }

    /// `-1/2 z^T H_y z + b_y^T z + c_y` evaluated directly.
    pub fn logit(&self, z: &[f64], y: usize) -> f64 {
        let v = DVector::from_column_slice(z);
        -0.5 * v.dot(&(&self.h[y] * &v)) + self.b[y].dot(&v) + self.c[y]
    }

    /// All class logits on the tape, `n x C`.
    pub fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let k = self.dim();
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != k {
            return Err(shape_err("quadratic_logits", format!("input {shape:?} for dim {k}")));
        }
        let n = shape[0];
        let ones = tape.constant(Tensor::full(vec![k, 1], 1.0));
        let mut cols: Option<Var> = None;
        for y in 0..self.h.len() {
            let col = self.class_logit_column(tape, x, y, n, ones)?;
            cols = Some(match cols {
                None => col,
                Some(acc) => tape.concat(acc, col)?,
            });
        }
        Ok(cols.unwrap())
    }

    fn class_logit_column(&self, tape: &mut Tape, x: Var, y: usize, n: usize, ones: Var) -> Result<Var> {
        let k = self.dim();
        let h = tape.constant(Tensor::matrix(k, k, self.h[y].transpose().as_slice().to_vec())?);
        let b = tape.constant(Tensor::matrix(k, 1, self.b[y].as_slice().to_vec())?);
        let xh = tape.matmul(x, h)?;
        let quad = tape.mul(xh, x)?;
        let quad = tape.matmul(quad, ones)?;
        let quad = tape.scale(quad, -0.5)?;
        let lin = tape.matmul(x, b)?;
        let c = tape.constant(Tensor::full(vec![n, 1], self.c[y]));
        let s = tape.add(quad, lin)?;
        tape.add(s, c)
    }

    /// Max abs gap between the taped log-likelihood and the direct formula
    /// (the softmax-normalized one when `normalized`) at `n` random points.
    pub fn exactness_error(&self, y: usize, n: usize, rng: &mut Rng) -> Result<f64> {
        let z = normal_tensor(rng, vec![n, self.dim()]);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let ll = self.log_likelihood(&mut tape, zv, y)?;
        let got = tape.value(ll).data().to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let expect = if self.normalized {
                let logits: Vec<f64> = (0..self.h.len()).map(|c| self.logit(row, c)).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                logits[y] - lse
            } else {
                self.logit(row, y)
            };
            worst = worst.max((got[i] - expect).abs());
        }
        Ok(worst)
    }
}

impl Likelihood for QuadraticLogitTask {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn classes(&self) -> usize {
        self.h.len()
    }

    fn log_likelihood(&self, tape: &mut Tape, x: Var, y: usize) -> Result<Var> {
        if y >= self.h.len() {
            return Err(Error::InvalidArgument(format!("class {y} out of range for {} classes", self.h.len())));
        }
        if self.normalized {
            let logits = self.logits_on(tape, x)?;
            let n = tape.value(logits).rows();
            tape.softmax_log_prob(logits, &vec![y; n])
        } else {
            let shape = tape.value(x).shape().to_vec();
            if shape.len() != 2 || shape[1] != self.dim() {
                return Err(shape_err("quadratic_logits", format!("input {shape:?} for dim {}", self.dim())));
            }
            let ones = tape.constant(Tensor::full(vec![self.dim(), 1], 1.0));
            let col = self.class_logit_column(tape, x, y, shape[0], ones)?;
            tape.sum_cols(col)
        }
    }
}

/// Exact power posterior `q(z) ∝ N(z; 0, I) exp((-1/2 z^T H z + b^T z) / gamma)`
/// for the unnormalized quadratic likelihood of class `y`: returns
/// `(mean, covariance)` with precision `I + H/gamma`.
pub fn analytic_power_posterior(task: &QuadraticLogitTask, y: usize, gamma: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if gamma == 0.0 {
        return Err(Error::InvalidArgument("point-estimate regime, no density".into()));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and > 0, got {gamma}")));
    }
    if y >= task.h.len() {
        return Err(Error::InvalidArgument(format!("class {y} out of range")));
    }
    let k = task.dim();
    let precision = DMatrix::identity(k, k) + &task.h[y] / gamma;
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("posterior precision is not positive definite".into()))?;
    let cov = chol.inverse();
    let mean = &cov * (&task.b[y] / gamma);
    Ok((mean, cov))
}

// ---------------------------------------------------------------------------
// Objectives

/// Generator composed with a likelihood: `log p(y | G(z))`.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub generator: &'a dyn CodeGenerator,
    pub likelihood: &'a dyn Likelihood,
}

impl<'a> Objective<'a> {
    pub fn new(generator: &'a dyn CodeGenerator, likelihood: &'a dyn Likelihood) -> Result<Self> {
        if generator.output_dim() != likelihood.input_dim() {
            return Err(shape_err(
                "objective",
                format!("generator emits {} dims, classifier takes {}", generator.output_dim(), likelihood.input_dim()),
            ));
        }
        Ok(Objective { generator, likelihood })
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.likelihood.classes() {
            return Err(Error::InvalidArgument(format!("class {y} out of range for {} classes", self.likelihood.classes())));
        }
        Ok(())
    }

    /// Per-row `log p(y | G(z))` for a single code shared by all layers.
    pub fn log_likelihood_on(&self, tape: &mut Tape, z: Var, y: usize) -> Result<Var> {
        let x = self.generator.generate_on(tape, z)?;
        self.likelihood.log_likelihood(tape, x, y)
    }

    /// Per-row `log p(y | S(f(z_1), ..., f(z_L)))`.
    pub fn layered_log_likelihood_on(&self, tape: &mut Tape, codes: &[Var], y: usize) -> Result<Var> {
        let x = self.generator.synthesize_on(tape, codes)?;
        self.likelihood.log_likelihood(tape, x, y)
    }
}

/// Objective terms on a tape.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
    pub layer_kl: Vec<Var>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// Builds the single-family objective from `noise` (`n_mc x k` standard normals).
pub fn vmi_loss_on(
    tape: &mut Tape,
    family: &Family,
    bound: &BoundFamily,
    obj: &Objective<'_>,
    y: usize,
    gamma: f64,
    noise: Tensor,
) -> Result<LossVars> {
    if family.dim() != obj.generator.code_dim() {
        return Err(shape_err("vmi_loss", format!("family dim {} for code dim {}", family.dim(), obj.generator.code_dim())));
    }
    let s = family.sample_on(tape, bound, noise)?;
    let ll = obj.log_likelihood_on(tape, s.codes, y)?;
    let m = tape.mean(ll)?;
    let nll = tape.scale(m, -1.0)?;
    let kl = family.kl_on(tape, bound, &s)?;
    let weighted = tape.scale(kl, gamma)?;
    let total = tape.add(nll, weighted)?;
    Ok(LossVars { total, nll, kl, layer_kl: vec![kl] })
}

/// Builds the layered objective; `noise[l]` drives layer `l`.
pub fn svmi_loss_on(
    tape: &mut Tape,
    family: &LayeredVariational,
    bounds: &[BoundFamily],
    obj: &Objective<'_>,
    y: usize,
    gamma: f64,
    noise: Vec<Tensor>,
) -> Result<LossVars> {
    let layers = obj.generator.layers();
    if family.layers() != layers || noise.len() != layers || bounds.len() != layers {
        return Err(Error::InvalidArgument(format!(
            "generator has {layers} layers, family {}",
            family.layers()
        )));
    }
    let mut samples = Vec::with_capacity(layers);
    for ((f, b), eps) in family.families().iter().zip(bounds).zip(noise) {
        if f.dim() != obj.generator.code_dim() {
            return Err(shape_err("svmi_loss", format!("layer family dim {} for code dim {}", f.dim(), obj.generator.code_dim())));
        }
        samples.push(f.sample_on(tape, b, eps)?);
    }
    let codes: Vec<Var> = samples.iter().map(|s| s.codes).collect();
    let ll = obj.layered_log_likelihood_on(tape, &codes, y)?;
    let m = tape.mean(ll)?;
    let nll = tape.scale(m, -1.0)?;
    let mut layer_kl = Vec::with_capacity(layers);
    for ((f, b), s) in family.families().iter().zip(bounds).zip(&samples) {
        layer_kl.push(f.kl_on(tape, b, s)?);
    }
    let mut sum = layer_kl[0];
    for &k in &layer_kl[1..] {
        sum = tape.add(sum, k)?;
    }
    let kl = tape.scale(sum, 1.0 / layers as f64)?;
    let weighted = tape.scale(kl, gamma)?;
    let total = tape.add(nll, weighted)?;
    Ok(LossVars { total, nll, kl, layer_kl })
}

/// Value and parameter gradients of an objective.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub total: f64,
    pub nll: f64,
    /// The KL term before multiplying by `gamma` (the per-layer mean when layered).
    pub kl: f64,
    pub layer_kl: Vec<f64>,
    /// One tensor per family parameter, in parameter order.
    pub gradients: Vec<Tensor>,
}

fn evaluate(tape: &Tape, vars: &LossVars, params: &[Var]) -> Result<LossEvaluation> {
    let grads = tape.backward(vars.total)?;
    Ok(LossEvaluation {
        total: tape.value(vars.total).item(),
        nll: tape.value(vars.nll).item(),
        kl: tape.value(vars.kl).item(),
        layer_kl: vars.layer_kl.iter().map(|&v| tape.value(v).item()).collect(),
        gradients: params.iter().map(|&v| grads.wrt(v)).collect(),
    })
}

/// Monte Carlo VMI objective with `n_mc` reparameterized draws.
pub fn vmi_loss(
    family: &Family,
    generator: &dyn CodeGenerator,
    likelihood: &dyn Likelihood,
    y: usize,
    gamma: f64,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<LossEvaluation> {
    check_gamma(gamma)?;
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let obj = Objective::new(generator, likelihood)?;
    obj.check_class(y)?;
    let noise = normal_tensor(rng, vec![n_mc, family.dim()]);
    let mut tape = Tape::new();
    let bound = family.bind(&mut tape, true);
    let vars = vmi_loss_on(&mut tape, family, &bound, &obj, y, gamma, noise)?;
    evaluate(&tape, &vars, &bound.vars())
}

/// Layered objective: joint per-layer draws through the synthesis network,
/// KL term `gamma / L * sum_l KL(q_l || N(0, I))`.
pub fn svmi_loss(
    family: &LayeredVariational,
    generator: &dyn CodeGenerator,
    likelihood: &dyn Likelihood,
    y: usize,
    gamma: f64,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<LossEvaluation> {
    check_gamma(gamma)?;
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let obj = Objective::new(generator, likelihood)?;
    obj.check_class(y)?;
    let noise: Vec<Tensor> = family.families().iter().map(|f| normal_tensor(rng, vec![n_mc, f.dim()])).collect();
    let mut tape = Tape::new();
    let bounds: Vec<BoundFamily> = family.families().iter().map(|f| f.bind(&mut tape, true)).collect();
    let vars = svmi_loss_on(&mut tape, family, &bounds, &obj, y, gamma, noise)?;
    let params: Vec<Var> = bounds.iter().flat_map(BoundFamily::vars).collect();
    evaluate(&tape, &vars, &params)
}

// ---------------------------------------------------------------------------
// Attack loop

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Flow,
    /// One family per generator layer, each of `layer_family` kind.
    Layered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFamilyKind {
    Gaussian,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Target class, 0-based.
    pub class: usize,
    pub gamma: f64,
    pub family: FamilyKind,
    pub layer_family: BaseFamilyKind,
    pub flow: FlowConfig,
    pub n_mc: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// The learning rate decays geometrically to this fraction of its
    /// initial value by the last step.
    pub final_lr_fraction: f64,
    pub steps: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Initial `log sigma` of Gaussian families (0 starts at the prior).
    pub init_log_std: f64,
    /// Draws used for the end-of-run KL and entropy diagnostics.
    pub diagnostic_samples: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            class: 0,
            gamma: 1.0,
            family: FamilyKind::Gaussian,
            layer_family: BaseFamilyKind::Gaussian,
            flow: FlowConfig::default(),
            n_mc: 64,
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-2,
            final_lr_fraction: 0.1,
            steps: 2000,
            seed: 0,
            restarts: 0,
            init_log_std: 0.0,
            diagnostic_samples: 2048,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0 and final_lr_fraction in (0, 1]".into()));
        }
        if self.diagnostic_samples < 2 {
            return Err(Error::InvalidArgument("diagnostic_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// The fitted distribution over codes.
#[derive(Clone, Debug, PartialEq)]
pub enum FittedFamily {
    Single(Family),
    Layered(LayeredVariational),
}

impl FittedFamily {
    fn families(&self) -> &[Family] {
        match self {
            FittedFamily::Single(f) => std::slice::from_ref(f),
            FittedFamily::Layered(l) => l.families(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FittedFamily::Single(f) => f.parameters_mut(),
            FittedFamily::Layered(l) => l.parameters_mut(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            FittedFamily::Single(f) => checkpoint::to_bytes(f),
            FittedFamily::Layered(l) => checkpoint::to_bytes(l),
        }
    }

    /// Decodes either checkpoint tag.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tag, _) = checkpoint::decode(bytes)?;
        if tag == LayeredVariational::TAG {
            Ok(FittedFamily::Layered(checkpoint::from_bytes(bytes)?))
        } else {
            Ok(FittedFamily::Single(checkpoint::from_bytes(bytes)?))
        }
    }

    /// Draws `n` observations `G(z)` (or `S(f(z_1), ..., f(z_L))`) with `sigma = 0`.
    pub fn generate(&self, generator: &dyn CodeGenerator, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut codes = Vec::new();
        for f in self.families() {
            let (z, _) = f.sample(n, rng)?;
            codes.push(tape.constant(z));
        }
        let x = match self {
            FittedFamily::Single(_) => generator.generate_on(&mut tape, codes[0])?,
            FittedFamily::Layered(_) => generator.synthesize_on(&mut tape, &codes)?,
        };
        Ok(tape.value(x).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub config: AttackConfig,
    pub family: FittedFamily,
    /// Objective terms before each update plus one after the last; length `steps + 1`.
    pub trace: Vec<TracePoint>,
    /// Joint `KL(q || N(0, I))`, summed over layers.
    pub final_kl: Estimate,
    /// Joint entropy `E[-log q]`, summed over layers.
    pub final_entropy: Estimate,
    pub layer_kl: Vec<Estimate>,
    pub layer_entropy: Vec<Estimate>,
    /// Which seeded restart produced the returned family.
    pub restart: usize,
}

fn initial_family(cfg: &AttackConfig, kind: BaseFamilyKind, dim: usize, restart: usize, rng: &mut Rng) -> Result<Family> {
    Ok(match kind {
        BaseFamilyKind::Gaussian => {
            let mean = if restart == 0 { vec![0.0; dim] } else { (0..dim).map(|_| normal(rng)).collect() };
            Family::Gaussian(GaussianFamily::new(mean, vec![cfg.init_log_std; dim])?)
        }
        BaseFamilyKind::Flow => {
            let mut flow = CouplingFlow::new(dim, &cfg.flow, rng)?;
            if restart > 0 {
                flow.randomize(rng, 0.1);
            }
            Family::Flow(flow)
        }
    })
}

fn fit_once(cfg: &AttackConfig, obj: &Objective<'_>, restart: usize) -> Result<AttackResult> {
    let k = obj.generator.code_dim();
    let mut init_rng = stream(cfg.seed, "attack.init", restart as u64);
    let mut fitted = match cfg.family {
        FamilyKind::Gaussian => FittedFamily::Single(initial_family(cfg, BaseFamilyKind::Gaussian, k, restart, &mut init_rng)?),
        FamilyKind::Flow => FittedFamily::Single(initial_family(cfg, BaseFamilyKind::Flow, k, restart, &mut init_rng)?),
        FamilyKind::Layered => FittedFamily::Layered(LayeredVariational::new(
            (0..obj.generator.layers())
                .map(|_| initial_family(cfg, cfg.layer_family, k, restart, &mut init_rng))
                .collect::<Result<_>>()?,
        )?),
    };
    let mut noise_rng = stream(cfg.seed, "attack.noise", restart as u64);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let decay = if cfg.steps > 1 { cfg.final_lr_fraction.ln() / (cfg.steps - 1) as f64 } else { 0.0 };
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
        let mut tape = Tape::new();
        let (vars, params) = match &fitted {
            FittedFamily::Single(f) => {
                let noise = normal_tensor(&mut noise_rng, vec![cfg.n_mc, k]);
                let bound = f.bind(&mut tape, true);
                let vars = vmi_loss_on(&mut tape, f, &bound, obj, cfg.class, cfg.gamma, noise).map_err(diverged)?;
                (vars, bound.vars())
            }
            FittedFamily::Layered(l) => {
                let noise = l.families().iter().map(|f| normal_tensor(&mut noise_rng, vec![cfg.n_mc, f.dim()])).collect();
                let bounds: Vec<BoundFamily> = l.families().iter().map(|f| f.bind(&mut tape, true)).collect();
                let vars = svmi_loss_on(&mut tape, l, &bounds, obj, cfg.class, cfg.gamma, noise).map_err(diverged)?;
                (vars, bounds.iter().flat_map(BoundFamily::vars).collect())
            }
        };
        let point = TracePoint {
            step,
            nll: tape.value(vars.nll).item(),
            kl: tape.value(vars.kl).item(),
            total: tape.value(vars.total).item(),
        };
        if !point.total.is_finite() {
            return Err(Error::Diverged { step, detail: "objective".into() });
        }
        trace.push(point);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(vars.total)?;
        let g: Vec<Tensor> = params.iter().map(|&v| grads.wrt(v)).collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { step, detail: "gradient".into() });
        }
        opt.set_lr(cfg.learning_rate * (decay * step as f64).exp());
        opt.step(fitted.params_mut(), &g);
    }

    let mut diag_rng = stream(cfg.seed, "attack.diagnostics", restart as u64);
    let mut layer_kl = Vec::new();
    let mut layer_entropy = Vec::new();
    for f in fitted.families() {
        layer_kl.push(match f {
            Family::Gaussian(g) => Estimate { estimate: g.kl_closed_form(), std_error: 0.0 },
            Family::Flow(_) => f.kl_monte_carlo(cfg.diagnostic_samples, &mut diag_rng)?,
        });
        layer_entropy.push(f.entropy(cfg.diagnostic_samples, &mut diag_rng)?);
    }
    let joint = |v: &[Estimate]| Estimate {
        estimate: v.iter().map(|e| e.estimate).sum(),
        std_error: v.iter().map(|e| e.std_error.powi(2)).sum::<f64>().sqrt(),
    };
    Ok(AttackResult {
        config: cfg.clone(),
        final_kl: joint(&layer_kl),
        final_entropy: joint(&layer_entropy),
        layer_kl,
        layer_entropy,
        family: fitted,
        trace,
        restart,
    })
}

/// Fits the configured family by stochastic gradient descent on the VMI
/// objective. With `restarts > 0` the run is repeated from seeded random
/// starts and the lowest final objective wins.
pub fn run_attack(cfg: &AttackConfig, generator: &dyn CodeGenerator, likelihood: &dyn Likelihood) -> Result<AttackResult> {
    cfg.validate()?;
    let obj = Objective::new(generator, likelihood)?;
    obj.check_class(cfg.class)?;
    let mut best: Option<AttackResult> = None;
    for r in 0..=cfg.restarts {
        let res = fit_once(cfg, &obj, r)?;
        let better = best.as_ref().is_none_or(|b| res.trace.last().unwrap().total < b.trace.last().unwrap().total);
        if better {
            best = Some(res);
        }
    }
    Ok(best.unwrap())
}

// ---------------------------------------------------------------------------
// Baselines

#[derive(Clone, Debug)]
pub struct GeneralMiResult {
    pub x: Tensor,
    /// Mean per-row `log p(y | x)` before each step and after the last.
    pub trace: Vec<f64>,
}

/// Gradient ascent on `log p(y | x)` directly in input space, one independent
/// ascent per row of `x_init`.
pub fn general_mi(likelihood: &dyn Likelihood, y: usize, x_init: &Tensor, steps: usize, lr: f64) -> Result<GeneralMiResult> {
    if x_init.shape().len() != 2 || x_init.cols() != likelihood.input_dim() {
        return Err(shape_err("general_mi", format!("x {:?} for input dim {}", x_init.shape(), likelihood.input_dim())));
    }
    if y >= likelihood.classes() {
        return Err(Error::InvalidArgument(format!("class {y} out of range")));
    }
    let mut x = x_init.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let (ll, total) = (|| {
            let ll = likelihood.log_likelihood(&mut tape, xv, y)?;
            let total = tape.sum(ll)?;
            Ok((ll, total))
        })()
        .map_err(|e: Error| Error::Diverged { step, detail: e.to_string() })?;
        let mean = tape.value(ll).data().iter().sum::<f64>() / x.rows() as f64;
        trace.push(mean);
        if step == steps {
            break;
        }
        let g = tape.backward(total)?.wrt(xv);
        let data: Vec<f64> = x.data().iter().zip(g.data()).map(|(a, d)| a + lr * d).collect();
        x = Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::Diverged { step, detail: "input update".into() })?;
    }
    Ok(GeneralMiResult { x, trace })
}

#[derive(Clone, Debug)]
pub struct GenerativeMiResult {
    pub z: Tensor,
    /// Summed objective over rows, before each step and after the last.
    pub trace: Vec<f64>,
    pub objective: f64,
}

/// `-lambda * log p(y | G(z)) - log sigmoid(D(G(z)))` summed over rows.
pub fn generative_mi_objective_on(
    tape: &mut Tape,
    obj: &Objective<'_>,
    discriminator: &Discriminator,
    y: usize,
    lambda: f64,
    z: Var,
) -> Result<Var> {
    let x = obj.generator.generate_on(tape, z)?;
    let ll = obj.likelihood.log_likelihood(tape, x, y)?;
    let logit = discriminator.logit_on(tape, x)?;
    let prior = tape.log_sigmoid(logit)?;
    let a = tape.sum(ll)?;
    let a = tape.scale(a, -lambda)?;
    let b = tape.sum(prior)?;
    tape.sub(a, b)
}

/// Gradient descent over codes on the GAN-prior point-estimate objective.
#[allow(clippy::too_many_arguments)]
pub fn generative_mi(
    generator: &dyn CodeGenerator,
    discriminator: &Discriminator,
    likelihood: &dyn Likelihood,
    y: usize,
    lambda: f64,
    z_init: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<GenerativeMiResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and > 0, got {lambda}")));
    }
    let obj = Objective::new(generator, likelihood)?;
    obj.check_class(y)?;
    if discriminator.input_dim() != generator.output_dim() {
        return Err(shape_err("generative_mi", "discriminator input dim differs from generator output"));
    }
    if z_init.shape().len() != 2 || z_init.cols() != generator.code_dim() {
        return Err(shape_err("generative_mi", format!("z {:?} for code dim {}", z_init.shape(), generator.code_dim())));
    }
    let mut z = z_init.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let total = generative_mi_objective_on(&mut tape, &obj, discriminator, y, lambda, zv)
            .map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
        trace.push(tape.value(total).item());
        if step == steps {
            break;
        }
        let g = tape.backward(total)?.wrt(zv);
        let data: Vec<f64> = z.data().iter().zip(g.data()).map(|(a, d)| a - lr * d).collect();
        z = Tensor::new(z.shape().to_vec(), data).map_err(|_| Error::Diverged { step, detail: "code update".into() })?;
    }
    let objective = *trace.last().unwrap();
    Ok(GenerativeMiResult { z, trace, objective })
}

/// Code-space prior used by [`fit_point_gaussian`].
#[derive(Clone, Copy)]
pub enum PointPrior<'a> {
    StandardNormal,
    /// Unnormalized prior `sigmoid(D(G(z)))`.
    Discriminator(&'a Discriminator),
}

/// VMI restricted to a Gaussian with fixed tiny `sigma` (only the mean is
/// fitted), with the KL term's cross-entropy against `prior`. Up to a constant
/// the objective is `E_q[-log p(y | G(z))] - gamma * E_q[log prior(z)]`;
/// plain gradient descent on the mean.
#[allow(clippy::too_many_arguments)]
pub fn fit_point_gaussian(
    generator: &dyn CodeGenerator,
    likelihood: &dyn Likelihood,
    prior: PointPrior<'_>,
    y: usize,
    gamma: f64,
    mean_init: &[f64],
    sigma: f64,
    n_mc: usize,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let obj = Objective::new(generator, likelihood)?;
    obj.check_class(y)?;
    let k = generator.code_dim();
    if mean_init.len() != k || !(sigma > 0.0) || n_mc == 0 {
        return Err(Error::InvalidArgument("mean_init must match code dim, sigma > 0, n_mc >= 1".into()));
    }
    let mut mean = Tensor::vector(mean_init.to_vec())?;
    let log_std = Tensor::full(vec![k], sigma.ln());
    for step in 0..steps {
        let mut tape = Tape::new();
        let m = tape.param(mean.clone());
        let ls = tape.constant(log_std.clone());
        let noise = normal_tensor(rng, vec![n_mc, k]);
        let total = (|| {
            let z = tape.gaussian_reparameterize(m, ls, noise)?;
            let x = generator.generate_on(&mut tape, z)?;
            let ll = likelihood.log_likelihood(&mut tape, x, y)?;
            let log_prior = match prior {
                PointPrior::StandardNormal => standard_normal_log_prob(&mut tape, z)?,
                PointPrior::Discriminator(d) => {
                    let l = d.logit_on(&mut tape, x)?;
                    tape.log_sigmoid(l)?
                }
            };
            let a = tape.mean(ll)?;
            let b = tape.mean(log_prior)?;
            let b = tape.scale(b, gamma)?;
            let s = tape.add(a, b)?;
            tape.scale(s, -1.0)
        })()
        .map_err(|e: Error| Error::Diverged { step, detail: e.to_string() })?;
        let g = tape.backward(total)?.wrt(m);
        let data: Vec<f64> = mean.data().iter().zip(g.data()).map(|(a, d)| a - lr * d).collect();
        mean = Tensor::vector(data).map_err(|_| Error::Diverged { step, detail: "mean update".into() })?;
    }
    Ok(mean.into_data())
}
