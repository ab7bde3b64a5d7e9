//! Code-space variational families: diagonal Gaussians and additive
//! coupling flows, plus per-layer products of them.
//!
//! Additive coupling is volume preserving, so a flow's log-density is the
//! standard-normal log-density of the inverted point with no Jacobian term.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{BlockReader, Checkpoint, ParamBlock};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp, Parameterized};
use crate::rng::{normal, normal_tensor, Rng};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// `KL(N(m_q, s_q) || N(m_p, s_p))` for full covariances, via Cholesky of `s_p`.
pub fn gaussian_kl(m_q: &DVector<f64>, s_q: &DMatrix<f64>, m_p: &DVector<f64>, s_p: &DMatrix<f64>) -> Result<f64> {
    let k = m_q.len();
    if m_p.len() != k || s_q.shape() != (k, k) || s_p.shape() != (k, k) {
        return Err(shape_err("gaussian_kl", format!("means {k} / {}, covariances {:?} / {:?}", m_p.len(), s_q.shape(), s_p.shape())));
    }
    let lp = s_p.clone().cholesky().ok_or(Error::Domain { op: "gaussian_kl", detail: "p covariance is not positive definite".into() })?;
    let lq = s_q.clone().cholesky().ok_or(Error::Domain { op: "gaussian_kl", detail: "q covariance is not positive definite".into() })?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = lp.solve(s_q).trace();
    let d = m_p - m_q;
    let maha = d.dot(&lp.solve(&d));
    Ok(0.5 * (trace + maha - k as f64 + logdet(&lp.l()) - logdet(&lq.l())))
}

/// Diagonal Gaussian `N(mean, diag(exp(log_std))^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFamily {
    mean: Tensor,
    log_std: Tensor,
}

impl GaussianFamily {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(shape_err("gaussian", format!("mean {} vs log_std {}", mean.len(), log_std.len())));
        }
        Ok(GaussianFamily { mean: Tensor::vector(mean)?, log_std: Tensor::vector(log_std)? })
    }

    /// `N(0, I_d)`.
    pub fn standard(dim: usize) -> Self {
        GaussianFamily { mean: Tensor::zeros(vec![dim]), log_std: Tensor::zeros(vec![dim]) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.data()
    }

    pub fn log_std(&self) -> &[f64] {
        self.log_std.data()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_std.data().iter().map(|s| (2.0 * s).exp()).collect()
    }

    /// `KL(q || N(0, I))` in closed form.
    pub fn kl_closed_form(&self) -> f64 {
        0.5 * self
            .mean
            .data()
            .iter()
            .zip(self.log_std.data())
            .map(|(m, s)| m * m + (2.0 * s).exp() - 1.0 - 2.0 * s)
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { blocks: 8, hidden: vec![32, 32], activation: Activation::Elu }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CouplingBlock {
    perm: Vec<usize>,
    inverse_perm: Vec<usize>,
    conditioner: Mlp,
}

/// Stack of additive coupling blocks over `N(0, I_d)`.
///
/// Each block shuffles coordinates with a fixed permutation, then shifts the
/// second half by a function of the first: `y2 = x2 + t(x1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingFlow {
    dim: usize,
    blocks: Vec<CouplingBlock>,
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl CouplingFlow {
    /// New flow with zeroed conditioner outputs, i.e. the identity map.
    pub fn new(dim: usize, config: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("flow dimension must be even and >= 2, got {dim}")));
        }
        if config.blocks == 0 {
            return Err(Error::InvalidArgument("flow needs at least one block".into()));
        }
        let half = dim / 2;
        let mut sizes = vec![half];
        sizes.extend(&config.hidden);
        sizes.push(half);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let mut perm: Vec<usize> = (0..dim).collect();
            perm.shuffle(rng);
            let mut conditioner = Mlp::new(&sizes, config.activation, rng)?;
            conditioner.zero_output_layer();
            blocks.push(CouplingBlock { inverse_perm: invert(&perm), perm, conditioner });
        }
        Ok(CouplingFlow { dim, blocks })
    }

    /// Single block with a caller-supplied conditioner `R^{d/2} -> R^{d/2}`.
    pub fn single_block(perm: Vec<usize>, conditioner: Mlp) -> Result<Self> {
        let dim = perm.len();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if dim < 2 || dim % 2 != 0 || sorted != (0..dim).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("permutation must be a bijection over an even dimension".into()));
        }
        if conditioner.input_dim() != dim / 2 || conditioner.output_dim() != dim / 2 {
            return Err(shape_err("coupling", format!("conditioner {:?} for dim {dim}", conditioner.sizes())));
        }
        Ok(CouplingFlow { dim, blocks: vec![CouplingBlock { inverse_perm: invert(&perm), perm, conditioner }] })
    }

    /// Redraws every conditioner output layer from `N(0, scale^2)` so the
    /// flow is no longer the identity.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) {
        for block in &mut self.blocks {
            let params = block.conditioner.parameters_mut();
            let n = params.len();
            for t in params.into_iter().skip(n - 2) {
                for v in t.data_mut() {
                    *v = scale * normal(rng);
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn permutation(&self, block: usize) -> &[usize] {
        &self.blocks[block].perm
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundMlp> {
        self.blocks.iter().map(|b| b.conditioner.bind(tape, trainable)).collect()
    }

    fn forward_on(&self, tape: &mut Tape, bound: &[BoundMlp], x: Var) -> Result<Var> {
        let h = self.dim / 2;
        let mut cur = x;
        for (block, cond) in self.blocks.iter().zip(bound) {
            let p = tape.permute_cols(cur, &block.perm)?;
            let x1 = tape.slice_cols(p, 0, h)?;
            let x2 = tape.slice_cols(p, h, self.dim)?;
            let shift = cond.forward(tape, x1)?;
            let y2 = tape.add(x2, shift)?;
            let joined = tape.concat(x1, y2)?;
            cur = tape.permute_cols(joined, &block.inverse_perm)?;
        }
        Ok(cur)
    }

    fn inverse_on(&self, tape: &mut Tape, bound: &[BoundMlp], y: Var) -> Result<Var> {
        let h = self.dim / 2;
        let mut cur = y;
        for (block, cond) in self.blocks.iter().zip(bound).rev() {
            let q = tape.permute_cols(cur, &block.perm)?;
            let y1 = tape.slice_cols(q, 0, h)?;
            let y2 = tape.slice_cols(q, h, self.dim)?;
            let shift = cond.forward(tape, y1)?;
            let x2 = tape.sub(y2, shift)?;
            let p = tape.concat(y1, x2)?;
            cur = tape.permute_cols(p, &block.inverse_perm)?;
        }
        Ok(cur)
    }

    fn check_codes(&self, t: &Tensor) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != self.dim {
            return Err(shape_err("flow", format!("codes {:?} for dim {}", t.shape(), self.dim)));
        }
        Ok(())
    }

    /// Pushes base points through the flow.
    pub fn forward(&self, base: &Tensor) -> Result<Tensor> {
        self.check_codes(base)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(base.clone());
        let y = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Maps codes back to base points.
    pub fn inverse(&self, codes: &Tensor) -> Result<Tensor> {
        self.check_codes(codes)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let y = tape.constant(codes.clone());
        let x = self.inverse_on(&mut tape, &bound, y)?;
        Ok(tape.value(x).clone())
    }
}

fn add_const(tape: &mut Tape, v: Var, c: f64) -> Result<Var> {
    let k = tape.constant(Tensor::full(tape.value(v).shape().to_vec(), c));
    tape.add(v, k)
}

/// Row-wise `log N(z; 0, I)` for an `n x d` matrix of codes.
pub fn standard_normal_log_prob(tape: &mut Tape, z: Var) -> Result<Var> {
    let d = tape.value(z).cols() as f64;
    let sq = tape.mul(z, z)?;
    let s = tape.sum_cols(sq)?;
    let s = tape.scale(s, -0.5)?;
    add_const(tape, s, -0.5 * d * LOG_2PI)
}

/// Plain-value `log N(z; 0, I)` per row.
pub fn standard_normal_log_prob_values(z: &Tensor) -> Vec<f64> {
    let d = z.cols() as f64;
    (0..z.rows()).map(|i| -0.5 * z.row(i).iter().map(|v| v * v).sum::<f64>() - 0.5 * d * LOG_2PI).collect()
}

/// A distribution in `Q_z`.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Gaussian(GaussianFamily),
    Flow(CouplingFlow),
}

#[derive(Clone, Debug)]
enum BoundKind {
    Gaussian { mean: Var, log_std: Var },
    Flow(Vec<BoundMlp>),
}

/// Family parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundFamily {
    kind: BoundKind,
}

impl BoundFamily {
    /// Vars in [`Parameterized::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        match &self.kind {
            BoundKind::Gaussian { mean, log_std } => vec![*mean, *log_std],
            BoundKind::Flow(conds) => conds.iter().flat_map(BoundMlp::vars).collect(),
        }
    }

    /// Swaps in `var` for the parameter at `index` (parameter order); used to
    /// differentiate with respect to one tensor at a time.
    pub fn with_var(mut self, mut index: usize, var: Var) -> Self {
        match &mut self.kind {
            BoundKind::Gaussian { mean, log_std } => *(if index == 0 { mean } else { log_std }) = var,
            BoundKind::Flow(conds) => {
                for c in conds.iter_mut() {
                    let n = c.vars().len();
                    if index < n {
                        *c = c.clone().with_var(index, var);
                        break;
                    }
                    index -= n;
                }
            }
        }
        self
    }
}

/// Reparameterized draw: codes and their exact log-densities.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub codes: Var,
    pub log_probs: Var,
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Estimate { estimate: mean, std_error }
    }
}

impl Family {
    pub fn dim(&self) -> usize {
        match self {
            Family::Gaussian(g) => g.dim(),
            Family::Flow(f) => f.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Family::Gaussian(_) => "gaussian",
            Family::Flow(_) => "flow",
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFamily {
        let kind = match self {
            Family::Gaussian(g) => {
                let (mean, log_std) = if trainable {
                    (tape.param(g.mean.clone()), tape.param(g.log_std.clone()))
                } else {
                    (tape.constant(g.mean.clone()), tape.constant(g.log_std.clone()))
                };
                BoundKind::Gaussian { mean, log_std }
            }
            Family::Flow(f) => BoundKind::Flow(f.bind(tape, trainable)),
        };
        BoundFamily { kind }
    }

    /// Draws `noise.rows()` codes by reparameterization from standard-normal
    /// `noise`.
    pub fn sample_on(&self, tape: &mut Tape, bound: &BoundFamily, noise: Tensor) -> Result<SampleVars> {
        if noise.shape().len() != 2 || noise.cols() != self.dim() {
            return Err(shape_err("sample", format!("noise {:?} for dim {}", noise.shape(), self.dim())));
        }
        match (self, &bound.kind) {
            (Family::Gaussian(_), BoundKind::Gaussian { mean, log_std }) => {
                let base = standard_normal_log_prob_values(&noise);
                let n = noise.rows();
                let ones = tape.constant(Tensor::full(noise.shape().to_vec(), 1.0));
                let codes = tape.gaussian_reparameterize(*mean, *log_std, noise)?;
                let ls = tape.mul_row(ones, *log_std)?;
                let ls = tape.sum_cols(ls)?;
                let base = tape.constant(Tensor::new(vec![n], base)?);
                let log_probs = tape.sub(base, ls)?;
                Ok(SampleVars { codes, log_probs })
            }
            (Family::Flow(f), BoundKind::Flow(conds)) => {
                let base = tape.constant(noise);
                let log_probs = standard_normal_log_prob(tape, base)?;
                let codes = f.forward_on(tape, conds, base)?;
                Ok(SampleVars { codes, log_probs })
            }
            _ => Err(Error::InvalidArgument("family bound to a different kind".into())),
        }
    }

    /// Exact log-density of each row of `codes`.
    pub fn log_prob_on(&self, tape: &mut Tape, bound: &BoundFamily, codes: Var) -> Result<Var> {
        let shape = tape.value(codes).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(shape_err("log_prob", format!("codes {shape:?} for dim {}", self.dim())));
        }
        match (self, &bound.kind) {
            (Family::Gaussian(_), BoundKind::Gaussian { mean, log_std }) => {
                let neg_mean = tape.scale(*mean, -1.0)?;
                let centered = tape.add_row(codes, neg_mean)?;
                let neg_ls = tape.scale(*log_std, -1.0)?;
                let inv_std = tape.exp(neg_ls)?;
                let eps = tape.mul_row(centered, inv_std)?;
                let base = standard_normal_log_prob(tape, eps)?;
                let ones = tape.constant(Tensor::full(shape, 1.0));
                let ls = tape.mul_row(ones, *log_std)?;
                let ls = tape.sum_cols(ls)?;
                tape.sub(base, ls)
            }
            (Family::Flow(f), BoundKind::Flow(conds)) => {
                let base = f.inverse_on(tape, conds, codes)?;
                standard_normal_log_prob(tape, base)
            }
            _ => Err(Error::InvalidArgument("family bound to a different kind".into())),
        }
    }

    /// `KL(q || N(0, I))` on the tape: closed form for Gaussians, the sample
    /// mean of `log q(z) - log N(z)` over `sample` for flows.
    pub fn kl_on(&self, tape: &mut Tape, bound: &BoundFamily, sample: &SampleVars) -> Result<Var> {
        match (self, &bound.kind) {
            (Family::Gaussian(_), BoundKind::Gaussian { mean, log_std }) => {
                let m2 = tape.mul(*mean, *mean)?;
                let two_ls = tape.scale(*log_std, 2.0)?;
                let var = tape.exp(two_ls)?;
                let t = tape.add(m2, var)?;
                let t = tape.sub(t, two_ls)?;
                let s = tape.sum(t)?;
                let s = add_const(tape, s, -(self.dim() as f64))?;
                tape.scale(s, 0.5)
            }
            (Family::Flow(_), BoundKind::Flow(_)) => {
                let prior = standard_normal_log_prob(tape, sample.codes)?;
                let diff = tape.sub(sample.log_probs, prior)?;
                tape.mean(diff)
            }
            _ => Err(Error::InvalidArgument("family bound to a different kind".into())),
        }
    }

    /// Draws `n` codes and their log-densities.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        let noise = normal_tensor(rng, vec![n, self.dim()]);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let s = self.sample_on(&mut tape, &bound, noise)?;
        Ok((tape.value(s.codes).clone(), tape.value(s.log_probs).clone()))
    }

    pub fn log_prob(&self, codes: &Tensor) -> Result<Tensor> {
        if codes.shape().len() != 2 || codes.cols() != self.dim() {
            return Err(shape_err("log_prob", format!("codes {:?} for dim {}", codes.shape(), self.dim())));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(codes.clone());
        let lp = self.log_prob_on(&mut tape, &bound, z)?;
        Ok(tape.value(lp).clone())
    }

    /// `KL(q || N(0, I))`. Gaussians use the closed form (standard error 0);
    /// flows average `log q(z) - log N(z)` over `n_mc` draws.
    pub fn kl_to_standard_normal(&self, n_mc: usize, rng: &mut Rng) -> Result<Estimate> {
        match self {
            Family::Gaussian(g) => Ok(Estimate { estimate: g.kl_closed_form(), std_error: 0.0 }),
            Family::Flow(_) => {
                if n_mc == 0 {
                    return Err(Error::InvalidArgument("flow KL needs n_mc >= 1".into()));
                }
                self.kl_monte_carlo(n_mc, rng)
            }
        }
    }

    /// Sample-based KL estimate for any family.
    pub fn kl_monte_carlo(&self, n: usize, rng: &mut Rng) -> Result<Estimate> {
        let (codes, log_probs) = self.sample(n, rng)?;
        let prior = standard_normal_log_prob_values(&codes);
        let diffs: Vec<f64> = log_probs.data().iter().zip(&prior).map(|(q, p)| q - p).collect();
        Ok(Estimate::from_samples(&diffs))
    }

    /// `E[-log q(z)]` from `n` draws.
    pub fn entropy(&self, n: usize, rng: &mut Rng) -> Result<Estimate> {
        let (_, log_probs) = self.sample(n, rng)?;
        let neg: Vec<f64> = log_probs.data().iter().map(|v| -v).collect();
        Ok(Estimate::from_samples(&neg))
    }

    fn to_blocks_prefixed(&self, prefix: &str) -> Vec<ParamBlock> {
        match self {
            Family::Gaussian(g) => vec![
                ParamBlock::new(format!("{prefix}kind"), vec![0.0]),
                ParamBlock::new(format!("{prefix}mean"), g.mean.data().to_vec()),
                ParamBlock::new(format!("{prefix}log_std"), g.log_std.data().to_vec()),
            ],
            Family::Flow(f) => {
                let mut out = vec![
                    ParamBlock::new(format!("{prefix}kind"), vec![1.0]),
                    ParamBlock::new(format!("{prefix}shape"), vec![f.dim as f64, f.blocks.len() as f64]),
                ];
                for (i, b) in f.blocks.iter().enumerate() {
                    out.push(ParamBlock::new(
                        format!("{prefix}block{i}.perm"),
                        b.perm.iter().map(|&p| p as f64).collect(),
                    ));
                    out.extend(b.conditioner.to_blocks(&format!("{prefix}block{i}.cond")));
                }
                out
            }
        }
    }

    fn from_blocks_prefixed(prefix: &str, r: &BlockReader) -> Result<Self> {
        match r.scalar(&format!("{prefix}kind"))? as i64 {
            0 => {
                let mean = r.get(&format!("{prefix}mean"))?.to_vec();
                let log_std = r.get(&format!("{prefix}log_std"))?.to_vec();
                Ok(Family::Gaussian(GaussianFamily::new(mean, log_std)?))
            }
            1 => {
                let shape = r.indices(&format!("{prefix}shape"))?;
                let [dim, count] = shape[..] else {
                    return Err(Error::Corrupt("flow shape block".into()));
                };
                let mut blocks = Vec::with_capacity(count);
                for i in 0..count {
                    let perm = r.indices(&format!("{prefix}block{i}.perm"))?;
                    let conditioner = Mlp::from_blocks(&format!("{prefix}block{i}.cond"), r)?;
                    let single = CouplingFlow::single_block(perm, conditioner)?;
                    blocks.extend(single.blocks);
                }
                if blocks.is_empty() || blocks[0].perm.len() != dim {
                    return Err(Error::Corrupt("flow blocks inconsistent with shape".into()));
                }
                Ok(Family::Flow(CouplingFlow { dim, blocks }))
            }
            k => Err(Error::Corrupt(format!("unknown family kind {k}"))),
        }
    }
}

impl Parameterized for Family {
    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Family::Gaussian(g) => vec![&g.mean, &g.log_std],
            Family::Flow(f) => f.blocks.iter().flat_map(|b| b.conditioner.parameters()).collect(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Family::Gaussian(g) => vec![&mut g.mean, &mut g.log_std],
            Family::Flow(f) => f.blocks.iter_mut().flat_map(|b| b.conditioner.parameters_mut()).collect(),
        }
    }
}

impl Checkpoint for Family {
    const TAG: &'static str = "variational_family";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        self.to_blocks_prefixed("")
    }

    fn from_blocks(reader: &BlockReader) -> Result<Self> {
        Family::from_blocks_prefixed("", reader)
    }
}

/// Independent per-layer families `q(z_1, ..., z_L) = prod_l q_l(z_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredVariational {
    families: Vec<Family>,
}

impl LayeredVariational {
    pub fn new(families: Vec<Family>) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::InvalidArgument("layered family needs at least one layer".into()));
        }
        Ok(LayeredVariational { families })
    }

    pub fn layers(&self) -> usize {
        self.families.len()
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn family(&self, l: usize) -> &Family {
        &self.families[l]
    }

    pub fn into_families(self) -> Vec<Family> {
        self.families
    }
}

impl Parameterized for LayeredVariational {
    fn parameters(&self) -> Vec<&Tensor> {
        self.families.iter().flat_map(Family::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.families.iter_mut().flat_map(Family::parameters_mut).collect()
    }
}

impl Checkpoint for LayeredVariational {
    const TAG: &'static str = "layered_variational";

    fn to_blocks(&self) -> Vec<ParamBlock> {
        let mut out = vec![ParamBlock::new("layers", vec![self.families.len() as f64])];
        for (l, f) in self.families.iter().enumerate() {
            out.extend(f.to_blocks_prefixed(&format!("layer{l}.")));
        }
        out
    }

    fn from_blocks(reader: &BlockReader) -> Result<Self> {
        let n = reader.scalar("layers")? as usize;
        let families = (0..n)
            .map(|l| Family::from_blocks_prefixed(&format!("layer{l}."), reader))
            .collect::<Result<_>>()?;
        LayeredVariational::new(families)
    }
}
