//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its result and the operand
//! handles needed to replay or differentiate it. Operands always precede the
//! node that consumes them, so a single reverse sweep suffices.

use super::tensor::{
    log_softmax, matmul_nt_into, matmul_tn_into, softmax_in_place, Tensor,
};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `[m×n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Multiply every entry by a `[1]` tensor.
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    /// Row-wise softmax over a square score matrix with entries `j > i` masked out.
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    NormalizeRows(Var),
    /// `Σ weight · log_softmax(logits[row])[col]` over the picks.
    LogLikelihood {
        logits: Var,
        picks: Vec<(usize, usize, f64)>,
    },
    /// Mean negative log-likelihood over the unmasked targets (0 when all are masked).
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) | MulScalar(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Relu(a) | Tanh(a) | Exp(a) | Abs(a) | Softmax(a)
            | CausalSoftmax(a) | Sum(a) | Mean(a) | MeanRows(a) | Reshape(a)
            | NormalizeRows(a) => vec![*a],
            LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Embedding { table, .. } => vec![*table],
            SliceCols { x, .. } => vec![*x],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            LogLikelihood { logits, .. } | CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let get = |v: Var| &self.nodes[v.0].value;
            eval(&op, &get)?
        };
        let requires_grad = op.operands().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::MulScalar(a, s))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Abs(a))
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::CausalSoftmax(a))
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gamma, beta })
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.record(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::MeanRows(a))
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, len })
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.value(a).shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(a).values().to_vec());
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::NormalizeRows(a))
    }
    pub fn log_likelihood(&mut self, logits: Var, picks: Vec<(usize, usize, f64)>) -> Result<Var> {
        self.record(Op::LogLikelihood { logits, picks })
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(a) => {
                    Tensor::from_parts(node.value.shape().to_vec(), values[a.0].values().to_vec())
                }
                op => {
                    let get = |v: Var| &values[v.0];
                    eval(op, &get)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from `output` with upstream gradient `seed`.
    ///
    /// The result holds `∂(seed · output)/∂node` for every node that requires
    /// a gradient.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("backward seed", seed.shape(), out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_parts(
            out_shape.to_vec(),
            seed.values().to_vec(),
        ));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g.values(), val(*b).values(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(val(*a).values(), g.values(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose();
                let ga = Tensor::from_parts(val(*a).shape().to_vec(), ga.into_values());
                self.accumulate(grads, *a, ga);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if rg(*row) {
                    let (m, n) = g.dims2();
                    let mut gr = vec![0.0; n];
                    for r in 0..m {
                        for (acc, x) in gr.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(val(*row).shape().to_vec(), gr));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = zip_map(g, val(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let gb = zip_map(g, val(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if rg(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * sv));
                }
                if rg(*s) {
                    self.accumulate(grads, *s, Tensor::scalar(g.dot(val(*a))));
                }
            }
            Op::Relu(a) => {
                let ga = zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, out, |x, y| x * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, zip_map(g, out, |x, y| x * y));
            }
            Op::Abs(a) => {
                let ga = zip_map(g, val(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let (m, n) = out.dims2();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[r * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = val(*x);
                let gam = val(*gamma).values();
                let (m, n) = xv.dims2();
                let mut gx = vec![0.0; m * n];
                let mut ggam = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let row = xv.row(r);
                    let (mu, inv_sigma) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mu) * inv_sigma;
                    }
                    let gy = g.row(r);
                    for j in 0..n {
                        gbeta[j] += gy[j];
                        ggam[j] += gy[j] * xhat[j];
                        dxhat[j] = gy[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv_sigma * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(val(*gamma).shape().to_vec(), ggam));
                self.accumulate(grads, *beta, Tensor::from_parts(val(*beta).shape().to_vec(), gbeta));
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let (v, d) = t.dims2();
                let mut gt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, x) in gt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(t.shape().to_vec(), gt));
            }
            Op::Sum(a) => {
                let a_val = val(*a);
                self.accumulate(grads, *a, Tensor::filled(a_val.shape(), g.item()));
            }
            Op::Mean(a) => {
                let a_val = val(*a);
                let s = g.item() / a_val.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(a_val.shape(), s));
            }
            Op::MeanRows(a) => {
                let a_val = val(*a);
                let (m, n) = a_val.dims2();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        ga[r * n + j] = g.values()[j] / m as f64;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(a_val.shape().to_vec(), ga));
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if rg(*p) {
                        let mut gp = vec![0.0; m * w];
                        for r in 0..m {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.values()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let n = pv.len();
                    if rg(*p) {
                        let gp = g.values()[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), gp));
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                let ga = Tensor::from_parts(val(*a).shape().to_vec(), g.values().to_vec());
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let av = val(*a);
                let (m, n) = av.dims2();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let x = av.row(r);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_EPS);
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[r * n + j] = (gy[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            Op::LogLikelihood { logits, picks } => {
                let lv = val(*logits);
                let gl = loglik_grad(lv, picks.iter().copied(), g.item());
                self.accumulate(grads, *logits, gl);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count > 0 {
                    let w = -1.0 / count as f64;
                    let picks = targets
                        .iter()
                        .enumerate()
                        .filter_map(|(r, t)| t.map(|c| (r, c, w)));
                    let gl = loglik_grad(lv, picks, g.item());
                    self.accumulate(grads, *logits, gl);
                } else {
                    self.accumulate(grads, *logits, Tensor::zeros(lv.shape()));
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        b.shape().to_vec(),
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn loglik_grad(
    logits: &Tensor,
    picks: impl Iterator<Item = (usize, usize, f64)>,
    upstream: f64,
) -> Tensor {
    let (_, n) = logits.dims2();
    let mut gl = vec![0.0; logits.len()];
    let mut cache: Option<(usize, Vec<f64>)> = None;
    for (r, c, w) in picks {
        let probs = match &cache {
            Some((row, p)) if *row == r => p,
            _ => {
                let mut p = logits.row(r).to_vec();
                softmax_in_place(&mut p);
                cache = Some((r, p));
                &cache.as_ref().unwrap().1
            }
        };
        let s = upstream * w;
        for j in 0..n {
            gl[r * n + j] -= s * probs[j];
        }
        gl[r * n + c] += s;
    }
    Tensor::from_parts(logits.shape().to_vec(), gl)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() || a.dims2() != b.dims2() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Forward evaluation shared by recording and replay.
fn eval<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => super::tensor::matmul(get(*a), get(*b))?,
        Op::Transpose(a) => get(*a).transpose(),
        Op::Add(a, b) => {
            let (x, y) = (get(*a), get(*b));
            same_shape("add", x, y)?;
            zip_map(x, y, |p, q| p + q)
        }
        Op::AddRow(a, row) => {
            let (x, r) = (get(*a), get(*row));
            let (m, n) = x.dims2();
            if r.len() != n {
                return Err(Error::dim("add_row", x.shape(), r.shape()));
            }
            let mut v = x.values().to_vec();
            for i in 0..m {
                for (o, b) in v[i * n..(i + 1) * n].iter_mut().zip(r.values()) {
                    *o += b;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), v)
        }
        Op::Mul(a, b) => {
            let (x, y) = (get(*a), get(*b));
            same_shape("mul", x, y)?;
            zip_map(x, y, |p, q| p * q)
        }
        Op::Scale(a, c) => get(*a).map(|x| x * c),
        Op::MulScalar(a, s) => {
            let sv = get(*s);
            if sv.len() != 1 {
                return Err(Error::dim("mul_scalar", get(*a).shape(), sv.shape()));
            }
            let s = sv.item();
            get(*a).map(|x| x * s)
        }
        Op::Relu(a) => get(*a).map(|x| x.max(0.0)),
        Op::Tanh(a) => get(*a).map(f64::tanh),
        Op::Exp(a) => get(*a).map(f64::exp),
        Op::Abs(a) => get(*a).map(f64::abs),
        Op::Softmax(a) => super::tensor::softmax(get(*a))?,
        Op::CausalSoftmax(a) => {
            let x = get(*a);
            let (m, n) = x.dims2();
            if m != n {
                return Err(Error::dim("causal_softmax", x.shape(), &[n, n]));
            }
            let mut v = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut v[i * n..(i + 1) * n];
                row[..=i].copy_from_slice(&x.row(i)[..=i]);
                softmax_in_place(&mut row[..=i]);
            }
            Tensor::from_parts(x.shape().to_vec(), v)
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (xv, gv, bv) = (get(*x), get(*gamma), get(*beta));
            let (m, n) = xv.dims2();
            if gv.len() != n || bv.len() != n {
                return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
            }
            let mut v = vec![0.0; m * n];
            for r in 0..m {
                let row = xv.row(r);
                let (mu, inv) = row_stats(row);
                for j in 0..n {
                    v[r * n + j] = (row[j] - mu) * inv * gv.values()[j] + bv.values()[j];
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), v)
        }
        Op::Embedding { table, ids } => {
            let t = get(*table);
            let (vocab, d) = t.dims2();
            if ids.is_empty() {
                return Err(Error::domain("embedding lookup with no ids"));
            }
            let mut v = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::domain(format!("embedding id {id} >= table size {vocab}")));
                }
                v.extend_from_slice(t.row(id));
            }
            Tensor::from_parts(vec![ids.len(), d], v)
        }
        Op::Sum(a) => Tensor::scalar(get(*a).sum()),
        Op::Mean(a) => {
            let x = get(*a);
            Tensor::scalar(x.sum() / x.len() as f64)
        }
        Op::MeanRows(a) => {
            let x = get(*a);
            let (m, n) = x.dims2();
            let mut v = vec![0.0; n];
            for r in 0..m {
                for (o, y) in v.iter_mut().zip(x.row(r)) {
                    *o += y;
                }
            }
            for o in v.iter_mut() {
                *o /= m as f64;
            }
            Tensor::from_parts(vec![1, n], v)
        }
        Op::SliceCols { x, start, len } => {
            let xv = get(*x);
            let (m, n) = xv.dims2();
            if start + len > n || *len == 0 {
                return Err(Error::dim("slice_cols", xv.shape(), &[*start, *len]));
            }
            let mut v = Vec::with_capacity(m * len);
            for r in 0..m {
                v.extend_from_slice(&xv.row(r)[*start..start + len]);
            }
            Tensor::from_parts(vec![m, *len], v)
        }
        Op::ConcatCols(parts) => {
            let first = get(*parts.first().ok_or_else(|| Error::domain("concat of nothing"))?);
            let m = first.rows();
            let mut total = 0;
            for p in parts {
                let pv = get(*p);
                if pv.rows() != m {
                    return Err(Error::dim("concat_cols", first.shape(), pv.shape()));
                }
                total += pv.cols();
            }
            let mut v = Vec::with_capacity(m * total);
            for r in 0..m {
                for p in parts {
                    v.extend_from_slice(get(*p).row(r));
                }
            }
            Tensor::from_parts(vec![m, total], v)
        }
        Op::ConcatRows(parts) => {
            let first = get(*parts.first().ok_or_else(|| Error::domain("concat of nothing"))?);
            let n = first.cols();
            let mut v = Vec::new();
            let mut rows = 0;
            for p in parts {
                let pv = get(*p);
                if pv.cols() != n {
                    return Err(Error::dim("concat_rows", first.shape(), pv.shape()));
                }
                rows += pv.rows();
                v.extend_from_slice(pv.values());
            }
            Tensor::from_parts(vec![rows, n], v)
        }
        Op::Reshape(_) => unreachable!("reshape is recorded directly"),
        Op::NormalizeRows(a) => {
            let x = get(*a);
            let (m, n) = x.dims2();
            let mut v = x.values().to_vec();
            for r in 0..m {
                let row = &mut v[r * n..(r + 1) * n];
                let norm = row.iter().map(|q| q * q).sum::<f64>().sqrt().max(NORMALIZE_EPS);
                for q in row.iter_mut() {
                    *q /= norm;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), v)
        }
        Op::LogLikelihood { logits, picks } => {
            let lv = get(*logits);
            let (m, n) = lv.dims2();
            let mut total = 0.0;
            let mut cache: Option<(usize, Vec<f64>)> = None;
            for &(r, c, w) in picks {
                if r >= m || c >= n {
                    return Err(Error::dim("log_likelihood", lv.shape(), &[r, c]));
                }
                if cache.as_ref().map(|(row, _)| *row) != Some(r) {
                    cache = Some((r, log_softmax(lv.row(r))));
                }
                total += w * cache.as_ref().unwrap().1[c];
            }
            Tensor::scalar(total)
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = get(*logits);
            let (m, n) = lv.dims2();
            if targets.len() != m {
                return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                if let Some(c) = *t {
                    if c >= n {
                        return Err(Error::domain(format!("target {c} out of range {n}")));
                    }
                    total -= log_softmax(lv.row(r))[c];
                    count += 1;
                }
            }
            Tensor::scalar(if count == 0 { 0.0 } else { total / count as f64 })
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward_scalar(x).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn seed_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(
            tape.backward(s, &Tensor::vector(vec![1.0, 1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 2, vec![1.0, 9.0, 1.0, 1.0]).unwrap());
        let p = tape.causal_softmax(s).unwrap();
        assert_eq!(tape.value(p).values(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_all_masked_is_zero() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 1.0, 0.0, -1.0]).unwrap());
        let ce = tape.cross_entropy(l, &[None, None]).unwrap();
        assert_eq!(tape.value(ce).item(), 0.0);
        let g = tape.backward_scalar(ce).unwrap();
        assert!(g.get(l).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.5, 0.7, -0.1]).unwrap());
        let b = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.2, 0.9, -1.1]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let d = tape.tanh(c).unwrap();
        let e = tape.softmax(d).unwrap();
        let r = tape.reshape(e, &[4]).unwrap();
        let _ = tape.sum(r).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
    }
}
