use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Elu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Concat(Var, Var),
    Slice { input: Var, start: usize, end: usize },
    Permute { input: Var, perm: Vec<usize> },
    LogSoftmax(Var),
    LogSoftmaxPick { logits: Var, labels: Vec<usize> },
    Reparameterize { mean: Var, log_std: Var, noise: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSoftmaxPick { .. } => "softmax_log_prob",
            Op::Reparameterize { .. } => "gaussian_reparameterize",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so parents always precede children
/// and the reverse sweep in [`Tape::backward`] is a plain reverse iteration.
/// A tape is built for one evaluation and then dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.adjoints.get(var.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new_unchecked(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a fixed input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn check(&self, v: Var, op: &'static str) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::InvalidArgument(format!("{op}: operand #{} is not on this tape", v.0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "node #{} ({}) entry {i} = {}",
                    self.nodes.len(),
                    op.name(),
                    value.data()[i]
                ),
            });
        }
        let needs_grad = self.needs(parents);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a, "matmul")?, self.check(b, "matmul")?);
        if !is_matrix(av) || !is_matrix(bv) || av.cols() != bv.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::new_unchecked(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n));
        self.push(Op::Matmul(a, b), out, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (av, bv) = (self.check(a, op)?, self.check(b, op)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.check(a, "scale")?, |x| c * x);
        self.push(Op::Scale(a, c), out, &[a])
    }

    fn row_operands(&self, x: Var, r: Var, op: &'static str) -> Result<()> {
        let (xv, rv) = (self.check(x, op)?, self.check(r, op)?);
        if !is_matrix(xv) || rv.rows() != 1 || rv.len() != xv.cols() {
            return Err(shape_err(op, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        Ok(())
    }

    /// `x[i, j] + row[j]` for an `n x m` matrix and a length-`m` row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_operands(x, row, "add_row")?;
        let (xv, rv) = (self.value(x), self.value(row));
        let m = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, v)| v + rv.data()[i % m]).collect();
        let out = Tensor::new_unchecked(xv.shape().to_vec(), data);
        self.push(Op::AddRow(x, row), out, &[x, row])
    }

    /// `x[i, j] * row[j]` for an `n x m` matrix and a length-`m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_operands(x, row, "mul_row")?;
        let (xv, rv) = (self.value(x), self.value(row));
        let m = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, v)| v * rv.data()[i % m]).collect();
        let out = Tensor::new_unchecked(xv.shape().to_vec(), data);
        self.push(Op::MulRow(x, row), out, &[x, row])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(self.check(a, "tanh")?, f64::tanh);
        self.push(Op::Tanh(a), out, &[a])
    }

    /// ELU with unit alpha.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.check(a, "elu")?, elu);
        self.push(Op::Elu(a), out, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.check(a, "sigmoid")?, sigmoid);
        self.push(Op::Sigmoid(a), out, &[a])
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.check(a, "log_sigmoid")?, log_sigmoid);
        self.push(Op::LogSigmoid(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a, "exp")?;
        if let Some(x) = v.data().iter().find(|&&x| x > 709.0) {
            return Err(Error::Domain { op: "exp", detail: format!("argument {x} overflows") });
        }
        let out = map(v, f64::exp);
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a, "log")?;
        if let Some(x) = v.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive argument {x}") });
        }
        let out = map(v, f64::ln);
        self.push(Op::Log(a), out, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a, "sum")?.data().iter().sum();
        self.push(Op::Sum(a), Tensor::new_unchecked(vec![], vec![s]), &[a])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a, "mean")?;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::new_unchecked(vec![], vec![s]), &[a])
    }

    /// Row sums of an `n x m` matrix, as a length-`n` vector.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a, "sum_cols")?;
        if !is_matrix(v) {
            return Err(shape_err("sum_cols", format!("expected matrix, got {:?}", v.shape())));
        }
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let out = Tensor::new_unchecked(vec![v.rows()], data);
        self.push(Op::SumCols(a), out, &[a])
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a, "concat")?, self.check(b, "concat")?);
        if !is_matrix(av) || !is_matrix(bv) || av.rows() != bv.rows() {
            return Err(shape_err("concat", format!("{:?} | {:?}", av.shape(), bv.shape())));
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Op::Concat(a, b), Tensor::new_unchecked(vec![n, p + q], data), &[a, b])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.check(a, "slice")?;
        if !is_matrix(v) || start >= end || end > v.cols() {
            return Err(shape_err("slice", format!("{:?}[:, {start}..{end}]", v.shape())));
        }
        let n = v.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let out = Tensor::new_unchecked(vec![n, end - start], data);
        self.push(Op::Slice { input: a, start, end }, out, &[a])
    }

    /// Column gather: `out[:, j] = x[:, perm[j]]`. `perm` must be a bijection.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.check(a, "permute")?;
        let m = v.cols();
        let mut seen = vec![false; m];
        let bijective = perm.len() == m
            && perm.iter().all(|&p| p < m && !std::mem::replace(&mut seen[p], true));
        if !is_matrix(v) || !bijective {
            return Err(shape_err(
                "permute",
                format!("{:?} with permutation of length {}", v.shape(), perm.len()),
            ));
        }
        let n = v.rows();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = v.row(i);
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let out = Tensor::new_unchecked(vec![n, m], data);
        self.push(Op::Permute { input: a, perm: perm.to_vec() }, out, &[a])
    }

    /// Row-wise log-softmax of an `n x C` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a, "log_softmax")?;
        if !is_matrix(v) {
            return Err(shape_err("log_softmax", format!("expected matrix, got {:?}", v.shape())));
        }
        let mut data = Vec::with_capacity(v.len());
        for i in 0..v.rows() {
            let row = v.row(i);
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new_unchecked(v.shape().to_vec(), data);
        self.push(Op::LogSoftmax(a), out, &[a])
    }

    /// `log softmax(logits[i])[labels[i]]` for each row, as a length-`n` vector.
    pub fn softmax_log_prob(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.check(logits, "softmax_log_prob")?;
        if !is_matrix(v) || labels.len() != v.rows() || labels.iter().any(|&l| l >= v.cols()) {
            return Err(shape_err(
                "softmax_log_prob",
                format!("logits {:?} with {} labels", v.shape(), labels.len()),
            ));
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = v.row(i);
                row[l] - log_sum_exp(row)
            })
            .collect();
        let out = Tensor::new_unchecked(vec![v.rows()], data);
        self.push(Op::LogSoftmaxPick { logits, labels: labels.to_vec() }, out, &[logits])
    }

    /// `mean + exp(log_std) * noise` with `noise` an `n x d` constant and
    /// `mean`, `log_std` length-`d` rows.
    pub fn gaussian_reparameterize(&mut self, mean: Var, log_std: Var, noise: Tensor) -> Result<Var> {
        let (mv, sv) = (self.check(mean, "gaussian_reparameterize")?, self.check(log_std, "gaussian_reparameterize")?);
        let d = noise.cols();
        if noise.shape().len() != 2 || mv.len() != d || sv.len() != d || mv.rows() != 1 || sv.rows() != 1 {
            return Err(shape_err(
                "gaussian_reparameterize",
                format!("mean {:?}, log_std {:?}, noise {:?}", mv.shape(), sv.shape(), noise.shape()),
            ));
        }
        let std: Vec<f64> = sv.data().iter().map(|s| s.exp()).collect();
        let data = noise
            .data()
            .iter()
            .enumerate()
            .map(|(i, e)| mv.data()[i % d] + std[i % d] * e)
            .collect();
        let out = Tensor::new_unchecked(noise.shape().to_vec(), data);
        self.push(Op::Reparameterize { mean, log_std, noise }, out, &[mean, log_std])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.nodes.get(root.0).map(|n| &n.value).ok_or_else(|| {
            Error::InvalidArgument(format!("backward: root #{} has not been recorded", root.0))
        })?;
        if root_value.len() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", root_value.shape())));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(bv.data(), k, n);
                    acc(*a, Tensor::new_unchecked(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)));
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(av.data(), m, k);
                    acc(*b, Tensor::new_unchecked(vec![k, n], matmul_raw(&at, g.data(), k, m, n)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), |x, y| x * y));
                acc(*b, zip(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, map(g, |x| c * x)),
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                let m = g.cols();
                let mut gr = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % m] += v;
                }
                acc(*r, Tensor::new_unchecked(val(*r).shape().to_vec(), gr));
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let m = g.cols();
                let gx = g.data().iter().enumerate().map(|(i, v)| v * rv.data()[i % m]).collect();
                acc(*x, Tensor::new_unchecked(xv.shape().to_vec(), gx));
                let mut gr = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % m] += v * xv.data()[i];
                }
                acc(*r, Tensor::new_unchecked(rv.shape().to_vec(), gr));
            }
            Op::Tanh(a) => acc(*a, zip(g, &node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Elu(a) => acc(*a, zip(g, &node.value, |gv, y| if y > 0.0 { gv } else { gv * (y + 1.0) })),
            Op::Sigmoid(a) => acc(*a, zip(g, &node.value, |gv, y| gv * y * (1.0 - y))),
            Op::LogSigmoid(a) => acc(*a, zip(g, val(*a), |gv, x| gv * sigmoid(-x))),
            Op::Exp(a) => acc(*a, zip(g, &node.value, |gv, y| gv * y)),
            Op::Log(a) => acc(*a, zip(g, val(*a), |gv, x| gv / x)),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / n));
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let m = av.cols();
                let data = (0..av.len()).map(|i| g.data()[i / m]).collect();
                acc(*a, Tensor::new_unchecked(av.shape().to_vec(), data));
            }
            Op::Concat(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for i in 0..n {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new_unchecked(vec![n, p], ga));
                acc(*b, Tensor::new_unchecked(vec![n, q], gb));
            }
            Op::Slice { input, start, end } => {
                let iv = val(*input);
                let m = iv.cols();
                let mut gi = vec![0.0; iv.len()];
                for i in 0..iv.rows() {
                    gi[i * m + start..i * m + end].copy_from_slice(g.row(i));
                }
                acc(*input, Tensor::new_unchecked(iv.shape().to_vec(), gi));
            }
            Op::Permute { input, perm } => {
                let iv = val(*input);
                let m = iv.cols();
                let mut gi = vec![0.0; iv.len()];
                for i in 0..iv.rows() {
                    for (j, &p) in perm.iter().enumerate() {
                        gi[i * m + p] += g.data()[i * m + j];
                    }
                }
                acc(*input, Tensor::new_unchecked(iv.shape().to_vec(), gi));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut gi = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    let grow = g.row(i);
                    let total: f64 = grow.iter().sum();
                    gi.extend((0..c).map(|j| grow[j] - y.row(i)[j].exp() * total));
                }
                acc(*a, Tensor::new_unchecked(y.shape().to_vec(), gi));
            }
            Op::LogSoftmaxPick { logits, labels } => {
                let lv = val(*logits);
                let c = lv.cols();
                let mut gi = Vec::with_capacity(lv.len());
                for (i, &l) in labels.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    let gv = g.data()[i];
                    gi.extend((0..c).map(|j| {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gv * (onehot - (row[j] - lse).exp())
                    }));
                }
                acc(*logits, Tensor::new_unchecked(lv.shape().to_vec(), gi));
            }
            Op::Reparameterize { mean, log_std, noise } => {
                let d = noise.cols();
                let sv = val(*log_std);
                let mut gm = vec![0.0; d];
                let mut gs = vec![0.0; d];
                for (i, (gv, e)) in g.data().iter().zip(noise.data()).enumerate() {
                    gm[i % d] += gv;
                    gs[i % d] += gv * sv.data()[i % d].exp() * e;
                }
                acc(*mean, Tensor::new_unchecked(val(*mean).shape().to_vec(), gm));
                acc(*log_std, Tensor::new_unchecked(sv.shape().to_vec(), gs));
            }
        }
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error over coordinates:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be positive, got {eps}")));
    }
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(shape_err("finite_diff_check", format!("function returned {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "finite_diff_check objective".into() });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
