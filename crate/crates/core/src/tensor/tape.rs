//! Wengert-list tape for reverse-mode differentiation in 64-bit floats.
//!
//! Nodes are appended in execution order; `backward` walks them in strict
//! reverse order. Only nodes downstream of a `requires_grad` leaf or a tap
//! carry gradients, so frozen weights cost nothing on the way back.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels;
use super::{bad_broadcast, bad_matmul, broadcast_ok, Graph, Tensor, Var};
use crate::error::{DoeError, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Pick(Var, usize, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SelectCols(a, _)
            | Op::ScatterCols(a, _)
            | Op::Pick(a, _, _)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
    tapped: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by variable.
#[derive(Debug, Default, Clone)]
pub struct Grads {
    grads: BTreeMap<Var, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recording tape. Borrowed constants (frozen weights) are never copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    train_weights: bool,
    weights: Vec<(*const Tensor<f64>, Var)>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which [`Graph::weight`] inputs receive gradients.
    pub fn with_trainable_weights() -> Self {
        Tape {
            train_weights: true,
            ..Tape::default()
        }
    }

    /// Weight tensors inserted through [`Graph::weight`], identified by
    /// address, with their tape variables.
    pub fn weight_vars(&self) -> &[(*const Tensor<f64>, Var)] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a trainable leaf. The tensor is treated as a matrix.
    pub fn param(&mut self, t: Tensor<f64>) -> Var {
        let (rows, cols) = t.as_matrix_dims();
        let v = self.push(Cow::Owned(t.into_data()), rows, cols, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Inserts a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<f64>) -> Var {
        let rg = t.requires_grad;
        let (rows, cols) = t.as_matrix_dims();
        let v = self.push(Cow::Owned(t.into_data()), rows, cols, Op::Leaf);
        self.nodes[v.0].requires_grad = rg;
        v
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<f64> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("node shape is consistent")
    }

    /// Scalar `a[row, col]`.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if row >= r || col >= c {
            return Err(DoeError::dim(format!(
                "pick ({row},{col}) outside {r}x{c}"
            )));
        }
        let v = self.nodes[a.0].value[row * c + col];
        Ok(self.push(Cow::Owned(vec![v]), 1, 1, Op::Pick(a, row, col)))
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(a))
    }

    /// Summed cross-entropy of each logits row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(DoeError::dim(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(DoeError::dim(format!(
                "cross_entropy: target {t} outside {c} classes"
            )));
        }
        let mut probs = vec![0.0; r * c];
        if !kernels::softmax_rows(&self.nodes[logits.0].value, r, c, &mut probs) {
            return Err(DoeError::Numeric("NaN logits in cross_entropy".into()));
        }
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * c + t].ln())
            .sum();
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: false,
            tapped: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if !broadcast_ok(sa, sb) {
            return Err(bad_broadcast(name, sa, sb));
        }
        let (av, bv) = (self.val(a), self.val(b));
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.chunks(sa.1.max(1))
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
                .collect()
        };
        Ok(out)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    ///
    /// Every `requires_grad` leaf and every tapped node receives a gradient
    /// of its own shape (zeros when the loss does not depend on it). The
    /// tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(DoeError::Usage("backward on an empty tape".into()));
        }
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(DoeError::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let n = loss.0 + 1;
        let mut track = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            track[i] = node.requires_grad
                || node.tapped
                || node.op.inputs().iter().any(|v| track[v.0]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !track[i] {
                continue;
            }
            self.propagate(i, &g, &track, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Grads::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad || node.tapped {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.rows * node.cols]);
                out.grads.insert(Var(i), g);
            }
        }
        self.nodes.clear();
        self.weights.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], track: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let want = |v: &Var| track[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                if want(a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt(g, self.val(*b), m, cols, k, ga);
                }
                if want(b) {
                    let gb = slot(grads, *b, k * cols);
                    kernels::matmul_tn(self.val(*a), g, m, k, cols, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let nb = self.dims(*b).0;
                if want(a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nn(g, self.val(*b), m, nb, k, ga);
                }
                if want(b) {
                    let gb = slot(grads, *b, nb * k);
                    kernels::matmul_tn(g, self.val(*a), m, nb, k, gb);
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    let ga = slot(grads, *a, rows * cols);
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if want(b) {
                    let broadcast = self.dims(*b).0 != rows;
                    let gb = slot(grads, *b, self.val(*b).len());
                    accumulate_maybe_broadcast(gb, g, cols, broadcast, |s, _| s);
                }
            }
            Op::Mul(a, b) => {
                let broadcast = self.dims(*b).0 != rows;
                let (av, bv) = (self.val(*a), self.val(*b));
                if want(a) {
                    let ga = slot(grads, *a, rows * cols);
                    for (idx, d) in ga.iter_mut().enumerate() {
                        let bi = if broadcast { idx % cols } else { idx };
                        *d += g[idx] * bv[bi];
                    }
                }
                if want(b) {
                    let gb = slot(grads, *b, bv.len());
                    accumulate_maybe_broadcast(gb, g, cols, broadcast, |s, idx| s * av[idx]);
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, rows * cols);
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += s * x;
                }
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                let ga = slot(grads, *a, rows * cols);
                for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                    *d += s * kernels::gelu_grad(xv);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, rows * cols);
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, rows * cols);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let inner: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        ga[j] += y[j] * (g[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = self.val(*gain).to_vec();
                let mut dx = want(x).then(|| vec![0.0; rows * cols]);
                let mut dg = want(gain).then(|| vec![0.0; cols]);
                let mut db = want(bias).then(|| vec![0.0; cols]);
                kernels::layernorm_backward(
                    g,
                    xhat,
                    inv_std,
                    &gain_v,
                    rows,
                    cols,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(d) = d {
                        add_into(slot(grads, v, d.len()), &d);
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let (tr, tc) = self.dims(*table);
                let gt = slot(grads, *table, tr * tc);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * tc..(id + 1) * tc], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.val(*p).len();
                    if want(p) {
                        add_into(slot(grads, *p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (ar, ac) = self.dims(*a);
                let ga = slot(grads, *a, ar * ac);
                add_into(&mut ga[start * ac..(start + rows) * ac], g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if want(p) {
                        let gp = slot(grads, *p, rows * pc);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.dims(*a).1;
                let ga = slot(grads, *a, rows * ac);
                for r in 0..rows {
                    add_into(
                        &mut ga[r * ac + start..r * ac + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::SelectCols(a, index) => {
                let ac = self.dims(*a).1;
                let ga = slot(grads, *a, rows * ac);
                for r in 0..rows {
                    for (j, &src) in index.iter().enumerate() {
                        ga[r * ac + src] += g[r * cols + j];
                    }
                }
            }
            Op::ScatterCols(a, index) => {
                let ac = self.dims(*a).1;
                let ga = slot(grads, *a, rows * ac);
                for r in 0..rows {
                    for (j, &dst) in index.iter().enumerate() {
                        ga[r * ac + j] += g[r * cols + dst];
                    }
                }
            }
            Op::Pick(a, r, c) => {
                let ac = self.dims(*a).1;
                let (ar, _) = self.dims(*a);
                let ga = slot(grads, *a, ar * ac);
                ga[r * ac + c] += g[0];
            }
            Op::Sum(a) => {
                let len = self.val(*a).len();
                let ga = slot(grads, *a, len);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lc = self.dims(*logits).1;
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..lc {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * lc + j] += g[0] * (probs[r * lc + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_maybe_broadcast(
    dst: &mut [f64],
    g: &[f64],
    cols: usize,
    broadcast: bool,
    f: impl Fn(f64, usize) -> f64,
) {
    if broadcast {
        for (idx, &s) in g.iter().enumerate() {
            dst[idx % cols] += f(s, idx);
        }
    } else {
        for (idx, &s) in g.iter().enumerate() {
            dst[idx] += f(s, idx);
        }
    }
}

impl<'a> Graph<'a> for Tape<'a> {
    type F = f64;

    fn constant(&mut self, data: Cow<'a, [f64]>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(DoeError::dim(format!(
                "constant of {} values cannot be {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    fn value(&self, v: Var) -> &[f64] {
        self.val(v)
    }

    fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(bad_matmul((m, k), (k2, n), false));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.val(a), self.val(b), m, k, n, &mut out);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b)))
    }

    fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(bad_matmul((m, k), (n, k2), true));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.val(a), self.val(b), m, k, n, &mut out);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulNt(a, b)))
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b)))
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b)))
    }

    fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.dims(a);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, s))
    }

    fn gelu(&mut self, a: Var) -> Var {
        let out = self.val(a).iter().map(|&x| kernels::gelu(x)).collect();
        let (r, c) = self.dims(a);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a))
    }

    fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).iter().map(|&x| x.tanh()).collect();
        let (r, c) = self.dims(a);
        self.push(Cow::Owned(out), r, c, Op::Tanh(a))
    }

    fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        if !kernels::softmax_rows(self.val(a), r, c, &mut out) {
            return Err(DoeError::Numeric("NaN input to softmax".into()));
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(a)))
    }

    fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c < 2 {
            return Err(DoeError::dim(format!("layernorm needs width >= 2, got {c}")));
        }
        if self.val(gain).len() != c || self.val(bias).len() != c {
            return Err(DoeError::dim(format!(
                "layernorm gain/bias must have {c} entries"
            )));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        kernels::layernorm(
            self.val(x),
            self.val(gain),
            self.val(bias),
            r,
            c,
            eps,
            &mut out,
            Some(&mut xhat),
            Some(&mut inv_std),
        );
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, tc) = self.dims(table);
        let t = self.val(table);
        let mut out = Vec::with_capacity(ids.len() * tc);
        for &id in ids {
            if id >= tr {
                return Err(DoeError::dim(format!("row {id} outside table of {tr} rows")));
            }
            out.extend_from_slice(&t[id * tc..(id + 1) * tc]);
        }
        Ok(self.push(Cow::Owned(out), ids.len(), tc, Op::GatherRows(table, ids.to_vec())))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(DoeError::dim(format!(
                    "concat_rows: width {c} differs from {cols}"
                )));
            }
            out.extend_from_slice(self.val(p));
            rows += r;
        }
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec())))
    }

    fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(DoeError::dim(format!("slice_rows {start}+{len} beyond {r}")));
        }
        let out = self.val(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows(a, start)))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(DoeError::dim("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.val(p)[r * pc..(r + 1) * pc]);
            }
        }
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatCols(parts.to_vec())))
    }

    fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(DoeError::dim(format!("slice_cols {start}+{len} beyond {c}")));
        }
        let v = self.val(a);
        let out = (0..r)
            .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols(a, start)))
    }

    fn select_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(bad) = index.iter().find(|&&i| i >= c) {
            return Err(DoeError::dim(format!("select_cols index {bad} beyond {c}")));
        }
        let v = self.val(a);
        let out = (0..r)
            .flat_map(|i| index.iter().map(move |&j| v[i * c + j]))
            .collect();
        Ok(self.push(Cow::Owned(out), r, index.len(), Op::SelectCols(a, index.to_vec())))
    }

    fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = kernel_scatter(self.val(a), r, c, index, width)?;
        Ok(self.push(Cow::Owned(out), r, width, Op::ScatterCols(a, index.to_vec())))
    }

    fn tap(&mut self, v: Var) {
        self.nodes[v.0].tapped = true;
    }

    fn weight(&mut self, t: &'a Tensor<f64>, rows: usize, cols: usize) -> Result<Var> {
        let v = self.constant(Cow::Borrowed(t.data()), rows, cols)?;
        if self.train_weights {
            self.nodes[v.0].requires_grad = true;
            self.weights.push((t as *const _, v));
        }
        Ok(v)
    }
}

pub(crate) fn kernel_scatter<F: super::Scalar>(
    v: &[F],
    rows: usize,
    cols: usize,
    index: &[usize],
    width: usize,
) -> Result<Vec<F>> {
    if index.len() != cols {
        return Err(DoeError::dim(format!(
            "zero-recovery: {cols} columns but {} target positions",
            index.len()
        )));
    }
    if let Some(bad) = index.iter().find(|&&i| i >= width) {
        return Err(DoeError::dim(format!(
            "zero-recovery: position {bad} beyond width {width}"
        )));
    }
    let mut out = vec![F::ZERO; rows * width];
    for r in 0..rows {
        for (j, &dst) in index.iter().enumerate() {
            out[r * width + dst] = v[r * cols + j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.leaf(t(2, 2, &[0.0; 4]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, z).unwrap();
        assert_eq!(tape.value(q), &[0.0; 4]);
        let row = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let col = tape.leaf(t(2, 1, &[3.0, 4.0]));
        let s = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(s), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[0.0; 6]));
        let b = tape.leaf(t(2, 3, &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("[2x3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let s = tape.elementwise(super::super::Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);
        let z = tape.leaf(t(1, 1, &[0.0]));
        let g = tape.gelu(z);
        assert_eq!(tape.value(g), &[0.0]);

        let bad = tape.leaf(t(1, 3, &[0.0; 3]));
        assert!(matches!(tape.add(a, bad), Err(DoeError::Dimension(_))));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.param(t(1, 1, &[2.0]));
        let b = tape.param(t(1, 1, &[3.0]));
        let p = tape.mul(a, b).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0]);
        assert_eq!(grads.get(b).unwrap(), &[2.0]);
        assert!(tape.is_empty(), "tape is cleared after backward");
    }

    #[test]
    fn tapped_linear_and_square() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(1, 1, &[3.0]));
        let x = tape.leaf(t(1, 1, &[2.0]));
        let x2 = tape.scale(x, 1.0);
        tape.tap(x2);
        let loss = tape.mul(w, x2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x2).unwrap(), &[3.0]);
        assert!(grads.get(w).is_none(), "constants get no gradient");

        let mut tape = Tape::new();
        let x = tape.param(t(1, 1, &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        let a = tape.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(DoeError::Usage(_))));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(DoeError::Usage(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(3, 2, &[0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]));
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-15 && (v[5] - 0.75).abs() < 1e-15);
        let nan = tape.leaf(t(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(nan), Err(DoeError::Numeric(_))));
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[5.0, 5.0, 1.0, -1.0]));
        let one = tape.leaf(t(1, 2, &[1.0, 1.0]));
        let zero = tape.leaf(t(1, 2, &[0.0, 0.0]));
        let y = tape.layernorm(x, one, zero, 1e-5).unwrap();
        let v = tape.value(y).to_vec();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);

        let beta = tape.leaf(t(1, 2, &[0.7, -0.2]));
        let y = tape.layernorm(x, zero, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.7, -0.2, 0.7, -0.2]);

        let narrow = tape.leaf(t(1, 1, &[1.0]));
        let g1 = tape.leaf(t(1, 1, &[1.0]));
        assert!(tape.layernorm(narrow, g1, g1, 1e-5).is_err());
    }

    #[test]
    fn unused_tap_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let detached = tape.leaf(t(1, 2, &[4.0, 5.0]));
        let h = tape.scale(detached, 2.0);
        tape.tap(h);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(h).unwrap(), &[0.0, 0.0]);
    }
}
