//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. Parameters enter the tape through
//! [`Tape::param`] and their gradients are written back with
//! [`ParamStore::accumulate`]. [`Tape::stop_gradient`] copies a value while
//! cutting it out of the backward pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    #[serde(skip)]
    pub moment1: Option<Tensor>,
    #[serde(skip)]
    pub moment2: Option<Tensor>,
}

impl Parameter {
    fn new(name: &str, value: Tensor) -> Self {
        Parameter {
            name: name.to_string(),
            value,
            grad: None,
            moment1: None,
            moment2: None,
        }
    }

    /// The gradient, or zeros when none has been accumulated.
    pub fn grad_or_zero(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

/// Owns every learnable tensor of a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the gradients of every parameter leaf on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (&pid, &var) in &tape.param_vars {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[pid.0];
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// How [`Tape::cross_entropy_rows`] turns the selected probability into a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// `-log p_target`.
    NegLog,
    /// `-p_target`, the softmax ratio without the logarithm.
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Contiguous run of rows forming one causal attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Act(Var, Activation),
    Sum(Var),
    SumSquares(Var),
    Gather(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        exclude: Option<Vec<usize>>,
        tau: f64,
        mode: RatioMode,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, zeros if nothing reached it.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, no gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Add a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(row).len() != n {
            return Err(dim_err(format!(
                "add_row: row of length {} for {n} columns",
                self.value(row).len()
            )));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(v, Op::Act(a, act), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumSquares(a), rg)
    }

    /// Rows of `table` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(table).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err(format!("gather index {bad} out of {n} rows")));
        }
        if idx.is_empty() {
            return Err(dim_err("gather with no indices"));
        }
        let v = self.value(table).gather_rows(idx);
        let rg = self.rg(table);
        Ok(self.push(v, Op::Gather(table, idx.to_vec()), rg))
    }

    /// Each row divided by its Euclidean norm (zero rows stay zero).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let n = crate::tensor::norm(v.row(i));
            if n > 0.0 {
                v.row_mut(i).iter_mut().for_each(|a| *a /= n);
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(v, Op::NormalizeRows { x, norms }, rg)
    }

    /// Row-wise softmax of `x / tau`.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let v = softmax_with_temperature(self.value(x), tau)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, tau }, rg))
    }

    /// Per-row contrastive/cross-entropy loss over `logits / tau`.
    ///
    /// Row `i` selects column `targets[i]`; if `exclude` is given, column
    /// `exclude[i]` is dropped from that row's softmax. Returns a vector of
    /// per-row losses (`-log p` or `-p` depending on `mode`).
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude: Option<&[usize]>,
        tau: f64,
        mode: RatioMode,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(param_err(format!("temperature must be positive, got {tau}")));
        }
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(dim_err(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(ex) = exclude {
            if ex.len() != m {
                return Err(dim_err(format!("{} exclusions for {m} rows", ex.len())));
            }
        }
        let mut probs = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let t = targets[i];
            if t >= n {
                return Err(Error::Data(format!("target {t} outside {n} classes")));
            }
            let ex = exclude.map(|e| e[i]);
            if ex == Some(t) {
                return Err(Error::Data(format!("row {i}: target {t} is excluded")));
            }
            let row = lv.row(i);
            let p = &mut probs[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if Some(j) != ex && x / tau > max {
                    max = x / tau;
                }
            }
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if Some(j) != ex {
                    p[j] = (x / tau - max).exp();
                    z += p[j];
                }
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            let loss = match mode {
                RatioMode::NegLog => -(row[t] / tau - max - z.ln()),
                RatioMode::Neg => -p[t],
            };
            out.push(loss);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                exclude: exclude.map(|e| e.to_vec()),
                tau,
                mode,
                probs,
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(dim_err("layer_norm: gain/bias length mismatch"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, width]`; each segment is an independent
    /// sequence whose row `i` attends to rows `0..=i` of the same segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, width) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || width % heads != 0 {
            return Err(param_err(format!("{heads} heads do not divide width {width}")));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(dim_err("segments must tile the rows contiguously"));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(dim_err(format!("segments cover {covered} of {rows} rows")));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            segments,
            heads,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |v: Var, d: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c), grads),
            Op::AddRow(a, row) => {
                send(*a, g.clone(), grads);
                if self.rg(*row) {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for i in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    send(*row, Tensor::new(shape, acc).unwrap(), grads);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::N, bv.data(), Layout::T, &mut d, 0.0);
                    send(*a, Tensor::new(vec![m, k], d).unwrap(), grads);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::T, g.data(), Layout::N, &mut d, 0.0);
                    send(*b, Tensor::new(vec![k, n], d).unwrap(), grads);
                }
            }
            Op::MatMulT(a, b) => {
                // out = A · Bᵀ with A [m,k], B [n,k]
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::N, bv.data(), Layout::N, &mut d, 0.0);
                    send(*a, Tensor::new(vec![m, k], d).unwrap(), grads);
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), Layout::T, av.data(), Layout::N, &mut d, 0.0);
                    send(*b, Tensor::new(vec![n, k], d).unwrap(), grads);
                }
            }
            Op::Act(a, act) => {
                let d = g.zip_map(self.value(*a), |gi, x| gi * act.derivative(x));
                send(*a, d, grads);
            }
            Op::Sum(a) => {
                let s = g.item();
                send(*a, Tensor::full(self.value(*a).shape(), s), grads);
            }
            Op::SumSquares(a) => {
                let s = g.item();
                send(*a, self.value(*a).map(|x| 2.0 * s * x), grads);
            }
            Op::Gather(table, idx) => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                send(*table, d, grads);
            }
            Op::NormalizeRows { x, norms } => {
                // d = (g - y (y·g)) / ‖x‖
                let y = &node.value;
                let mut d = Tensor::zeros(y.shape());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let proj = crate::tensor::dot(yr, gr);
                    for ((o, yi), gi) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                send(*x, d, grads);
            }
            Op::Softmax { x, tau } => {
                let p = &node.value;
                let mut d = Tensor::zeros(p.shape());
                for i in 0..p.rows() {
                    let (pr, gr) = (p.row(i), g.row(i));
                    let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = pr[j] * (gr[j] - inner) / tau;
                    }
                }
                send(*x, d, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                exclude,
                tau,
                mode,
                probs,
            } => {
                let lv = self.value(*logits);
                let (m, n) = (lv.rows(), lv.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let t = targets[i];
                    let p = &probs[i * n..(i + 1) * n];
                    let row = &mut d[i * n..(i + 1) * n];
                    match mode {
                        RatioMode::NegLog => {
                            for j in 0..n {
                                row[j] = gi * p[j] / tau;
                            }
                            row[t] -= gi / tau;
                        }
                        RatioMode::Neg => {
                            let pt = p[t];
                            for j in 0..n {
                                row[j] = gi * pt * p[j] / tau;
                            }
                            row[t] -= gi * pt / tau;
                        }
                    }
                    if let Some(ex) = exclude {
                        row[ex[i]] = 0.0;
                    }
                }
                send(*logits, Tensor::new(vec![m, n], d).unwrap(), grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g.data()[i * n + j] * xhat[i * n + j];
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    send(*gamma, Tensor::new(gs.clone(), dg).unwrap(), grads);
                    send(*beta, Tensor::new(gs, db).unwrap(), grads);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g.data()[i * n + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g.data()[i * n + j] * gam[j];
                            dx[i * n + j] =
                                inv_std[i] / nf * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                    send(*x, Tensor::new(vec![m, n], dx).unwrap(), grads);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let width = g.cols();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    width,
                    segments,
                    *heads,
                    probs,
                );
                let shape = g.shape().to_vec();
                send(*q, Tensor::new(shape.clone(), dq).unwrap(), grads);
                send(*k, Tensor::new(shape.clone(), dk).unwrap(), grads);
                send(*v, Tensor::new(shape, dv).unwrap(), grads);
            }
        }
    }
}

/// Row-wise softmax of `logits / tau`, max-subtracted.
pub fn softmax_with_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {tau}")));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), tau);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x / tau - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Row-wise log-softmax of `logits / tau`.
pub fn log_softmax_with_temperature(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
    let lse = row.iter().map(|&x| (x / tau - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x / tau - lse).collect()
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    segments: &[Segment],
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let prob_len: usize = segments.iter().map(|s| s.len * (s.len + 1) / 2).sum::<usize>() * heads;
    let mut probs = Vec::with_capacity(prob_len);
    for seg in segments {
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..seg.len {
                let qi = &q[(seg.start + i) * width + c0..][..hd];
                let base = probs.len();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(seg.start + j) * width + c0..][..hd];
                    let s = crate::tensor::dot(qi, kj) * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let p = &mut probs[base..];
                let mut z = 0.0;
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                let o = &mut out[(seg.start + i) * width + c0..][..hd];
                for (j, x) in p.iter_mut().enumerate() {
                    *x /= z;
                    let vj = &v[(seg.start + j) * width + c0..][..hd];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += *x * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    width: usize,
    segments: &[Segment],
    heads: usize,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut offset = 0;
    let mut ds = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..seg.len {
                let ri = (seg.start + i) * width + c0;
                let p = &probs[offset..offset + i + 1];
                offset += i + 1;
                let gi = &g[ri..ri + hd];
                ds.clear();
                let mut inner = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let rj = (seg.start + j) * width + c0;
                    let dp = crate::tensor::dot(gi, &v[rj..rj + hd]);
                    inner += pj * dp;
                    ds.push(dp);
                    for (dvc, gc) in dv[rj..rj + hd].iter_mut().zip(gi) {
                        *dvc += pj * gc;
                    }
                }
                for (j, &pj) in p.iter().enumerate() {
                    let rj = (seg.start + j) * width + c0;
                    let s = pj * (ds[j] - inner) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[ri + c] += s * k[rj + c];
                        dk[rj + c] += s * q[ri + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Tape-free single-query attention step used by cached decoding.
///
/// The keys and values of one sequence arrive as row-major chunks
/// (`width` wide, e.g. a shared prefix cache followed by per-beam rows);
/// the query attends to every row of every chunk.
pub(crate) fn attend_one(
    query: &[f64],
    key_chunks: &[&[f64]],
    value_chunks: &[&[f64]],
    width: usize,
    heads: usize,
    out: &mut [f64],
) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n: usize = key_chunks.iter().map(|k| k.len() / width).sum();
    let mut scores = vec![0.0; n];
    out.iter_mut().for_each(|x| *x = 0.0);
    for h in 0..heads {
        let c0 = h * hd;
        let qh = &query[c0..c0 + hd];
        let mut max = f64::NEG_INFINITY;
        let mut j = 0;
        for keys in key_chunks {
            for row in keys.chunks_exact(width) {
                let s = crate::tensor::dot(qh, &row[c0..c0 + hd]) * scale;
                scores[j] = s;
                max = max.max(s);
                j += 1;
            }
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let mut j = 0;
        for values in value_chunks {
            for row in values.chunks_exact(width) {
                let p = scores[j] / z;
                for (o, vc) in out[c0..c0 + hd].iter_mut().zip(&row[c0..c0 + hd]) {
                    *o += p * vc;
                }
                j += 1;
            }
        }
    }
}
