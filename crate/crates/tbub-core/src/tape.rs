//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Every model operation is recorded on a [`Tape`] during the forward pass;
//! [`Tape::backward`] replays the records in reverse creation order (which is
//! a reverse topological order) and accumulates gradients into each node.
//! The tape is rebuilt for every forward pass because stream forking changes
//! the graph topology per input.
//!
//! All reductions run in a fixed sequential row-major order so that results
//! are bit-reproducible under a fixed seed.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use std::cell::RefCell;
use std::rc::Rc;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Collapse all rows into one via a per-column log-sum-exp.
    LogSumExpOverRows(usize),
    LogSigmoid(usize),
    Exp(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    /// out[i][j] = m[i][j] + v[0][j]
    AddRowBroadcast(usize, usize),
    /// out[i][j] = m[i][j] + v[i][0]
    AddColBroadcast(usize, usize),
    /// out[i][j] = m[i][j] * v[i][0]
    ScaleRows(usize, usize),
    /// Add row vector v to the listed rows of m.
    AddRowAt {
        m: usize,
        v: usize,
        rows: Vec<usize>,
    },
    /// out = m - s broadcast, s is 1x1.
    SubScalarBc(usize, usize),
    /// Half-split pairwise rotation with per-row angles (RoPE).
    RotatePairs {
        src: usize,
        cos: Matrix,
        sin: Matrix,
    },
    /// out = -(1/n) sum_i logp[i][targets[i]], 1x1.
    NegMeanPick {
        logp: usize,
        targets: Vec<usize>,
    },
    SumAll(usize),
}

struct NodeData {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

struct TapeInner {
    nodes: Vec<NodeData>,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one recorded value on a tape.
#[derive(Clone)]
pub struct Node {
    tape: Tape,
    idx: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Node {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(NodeData {
            value,
            grad: None,
            op,
        });
        Node {
            tape: self.clone(),
            idx,
        }
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Node {
        self.push(value, Op::Leaf)
    }

    /// Gather table rows by token id; gradient scatter-adds into the table.
    pub fn embedding(&self, table: &Node, ids: &[usize]) -> Node {
        let (value, op) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[table.idx].value;
            let mut out = Matrix::zeros(ids.len(), t.cols);
            for (i, &id) in ids.iter().enumerate() {
                assert!(id < t.rows, "token id {id} out of range {}", t.rows);
                out.row_slice_mut(i).copy_from_slice(t.row_slice(id));
            }
            (
                out,
                Op::Embedding {
                    table: table.idx,
                    ids: ids.to_vec(),
                },
            )
        };
        self.push(value, op)
    }

    /// Select rows of `src` (duplicates allowed); gradient routes to sources.
    pub fn gather_rows(&self, src: &Node, idx: &[usize]) -> Node {
        let (value, op) = {
            let inner = self.inner.borrow();
            let s = &inner.nodes[src.idx].value;
            let mut out = Matrix::zeros(idx.len(), s.cols);
            for (i, &r) in idx.iter().enumerate() {
                assert!(r < s.rows, "row index {r} out of range {}", s.rows);
                out.row_slice_mut(i).copy_from_slice(s.row_slice(r));
            }
            (
                out,
                Op::GatherRows {
                    src: src.idx,
                    idx: idx.to_vec(),
                },
            )
        };
        self.push(value, op)
    }

    pub fn concat_rows(&self, parts: &[Node]) -> Node {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let (value, op) = {
            let inner = self.inner.borrow();
            let cols = inner.nodes[parts[0].idx].value.cols;
            let rows: usize = parts.iter().map(|p| inner.nodes[p.idx].value.rows).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                let v = &inner.nodes[p.idx].value;
                assert_eq!(v.cols, cols, "concat_rows column mismatch");
                out.data[at..at + v.numel()].copy_from_slice(&v.data);
                at += v.numel();
            }
            (
                out,
                Op::ConcatRows {
                    parts: parts.iter().map(|p| p.idx).collect(),
                },
            )
        };
        self.push(value, op)
    }

    pub fn concat_cols(&self, parts: &[Node]) -> Node {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let (value, op) = {
            let inner = self.inner.borrow();
            let rows = inner.nodes[parts[0].idx].value.rows;
            let cols: usize = parts.iter().map(|p| inner.nodes[p.idx].value.cols).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                let v = &inner.nodes[p.idx].value;
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                for i in 0..rows {
                    out.data[i * cols + at..i * cols + at + v.cols]
                        .copy_from_slice(v.row_slice(i));
                }
                at += v.cols;
            }
            (
                out,
                Op::ConcatCols {
                    parts: parts.iter().map(|p| p.idx).collect(),
                },
            )
        };
        self.push(value, op)
    }

    /// Backward pass seeded from a 1x1 scalar node. Visits every recorded op
    /// exactly once, in reverse creation order.
    pub fn backward(&self, from: &Node) {
        let mut inner = self.inner.borrow_mut();
        {
            let out = &mut inner.nodes[from.idx];
            assert_eq!(
                (out.value.rows, out.value.cols),
                (1, 1),
                "backward seed must be a 1x1 scalar"
            );
            out.grad = Some(Matrix::from_vec(1, 1, vec![1.0]));
        }
        for i in (0..=from.idx).rev() {
            inner.step_backward(i);
        }
    }
}

impl TapeInner {
    fn ensure_grad(&mut self, idx: usize) -> &mut Matrix {
        let (rows, cols) = {
            let v = &self.nodes[idx].value;
            (v.rows, v.cols)
        };
        self.nodes[idx]
            .grad
            .get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    fn step_backward(&mut self, i: usize) {
        let g = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return, // not on any path to the seed
        };
        // Move the op out temporarily so we can mutate parent grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.ensure_grad(*a).add_assign(&g);
                self.ensure_grad(*b).add_assign(&g);
            }
            Op::Sub(a, b) => {
                self.ensure_grad(*a).add_assign(&g);
                let gb = self.ensure_grad(*b);
                for (o, &gv) in gb.data.iter_mut().zip(&g.data) {
                    *o -= gv;
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                let ga = self.ensure_grad(*a);
                for ((o, &gv), &bvv) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *o += gv * bvv;
                }
                let gb = self.ensure_grad(*b);
                for ((o, &gv), &avv) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o += gv * avv;
                }
            }
            Op::Scale(a, c) => {
                let ga = self.ensure_grad(*a);
                for (o, &gv) in ga.data.iter_mut().zip(&g.data) {
                    *o += gv * c;
                }
            }
            Op::Matmul(a, b) => {
                let ga_c = g.matmul_nt(&self.nodes[*b].value);
                let gb_c = self.nodes[*a].value.matmul_tn(&g);
                self.ensure_grad(*a).add_assign(&ga_c);
                self.ensure_grad(*b).add_assign(&gb_c);
            }
            Op::Transpose(a) => {
                self.ensure_grad(*a).add_assign(&g.transpose());
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let ga = self.ensure_grad(*a);
                for r in 0..y.rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let or = ga.row_slice_mut(r);
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let ga = self.ensure_grad(*a);
                for r in 0..y.rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let gsum: f64 = gr.iter().sum();
                    let or = ga.row_slice_mut(r);
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o += gv - yv.exp() * gsum;
                    }
                }
            }
            Op::LogSumExpOverRows(a) => {
                let out = self.nodes[i].value.clone();
                let xv = self.nodes[*a].value.clone();
                let ga = self.ensure_grad(*a);
                for r in 0..xv.rows {
                    let xr = xv.row_slice(r);
                    let or = ga.row_slice_mut(r);
                    for j in 0..xv.cols {
                        let o = out.data[j];
                        if o == f64::NEG_INFINITY {
                            continue;
                        }
                        or[j] += g.data[j] * (xr[j] - o).exp();
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let xv = self.nodes[*a].value.clone();
                let ga = self.ensure_grad(*a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    *o += gv * sigmoid(-x);
                }
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.clone();
                let ga = self.ensure_grad(*a);
                for ((o, &gv), &yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += gv * yv;
                }
            }
            Op::Gelu(a) => {
                let xv = self.nodes[*a].value.clone();
                let ga = self.ensure_grad(*a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    *o += gv * gelu_deriv(x);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = self.nodes[*gain].value.clone();
                let cols = xhat.cols;
                // Parameter grads: column sums.
                {
                    let gg = self.ensure_grad(*gain);
                    for r in 0..xhat.rows {
                        for j in 0..cols {
                            gg.data[j] += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                }
                {
                    let gb = self.ensure_grad(*bias);
                    for r in 0..xhat.rows {
                        for j in 0..cols {
                            gb.data[j] += g.at(r, j);
                        }
                    }
                }
                let gx = self.ensure_grad(*x);
                for r in 0..xhat.rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let gy = g.at(r, j) * gain_v.data[j];
                        m1 += gy;
                        m2 += gy * xhat.at(r, j);
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    let or = gx.row_slice_mut(r);
                    for j in 0..cols {
                        let gy = g.at(r, j) * gain_v.data[j];
                        or[j] += inv_std[r] * (gy - m1 - xhat.at(r, j) * m2);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let gt = self.ensure_grad(*table);
                for (i_row, &id) in ids.iter().enumerate() {
                    let gr = g.row_slice(i_row);
                    let tr = gt.row_slice_mut(id);
                    for (o, &gv) in tr.iter_mut().zip(gr) {
                        *o += gv;
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let gs = self.ensure_grad(*src);
                for (i_row, &r) in idx.iter().enumerate() {
                    let gr = g.row_slice(i_row);
                    let sr = gs.row_slice_mut(r);
                    for (o, &gv) in sr.iter_mut().zip(gr) {
                        *o += gv;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    let gp = self.ensure_grad(p);
                    for (o, &gv) in gp.data.iter_mut().zip(&g.data[at..at + n]) {
                        *o += gv;
                    }
                    at += n;
                }
            }
            Op::SliceCols { src, start } => {
                let gs = self.ensure_grad(*src);
                let scols = gs.cols;
                for r in 0..g.rows {
                    let gr = g.row_slice(r);
                    let dst = &mut gs.data[r * scols + start..r * scols + start + g.cols];
                    for (o, &gv) in dst.iter_mut().zip(gr) {
                        *o += gv;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let pcols = self.nodes[p].value.cols;
                    let gp = self.ensure_grad(p);
                    for r in 0..g.rows {
                        let gr = &g.row_slice(r)[at..at + pcols];
                        let dst = gp.row_slice_mut(r);
                        for (o, &gv) in dst.iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                    at += pcols;
                }
            }
            Op::AddRowBroadcast(m, v) => {
                self.ensure_grad(*m).add_assign(&g);
                let gv = self.ensure_grad(*v);
                for r in 0..g.rows {
                    for (o, &gvv) in gv.data.iter_mut().zip(g.row_slice(r)) {
                        *o += gvv;
                    }
                }
            }
            Op::AddColBroadcast(m, v) => {
                self.ensure_grad(*m).add_assign(&g);
                let gv = self.ensure_grad(*v);
                for r in 0..g.rows {
                    gv.data[r] += g.row_slice(r).iter().sum::<f64>();
                }
            }
            Op::ScaleRows(m, v) => {
                let mv = self.nodes[*m].value.clone();
                let vv = self.nodes[*v].value.clone();
                {
                    let gm = self.ensure_grad(*m);
                    for r in 0..g.rows {
                        let s = vv.data[r];
                        let gr = g.row_slice(r);
                        let or = gm.row_slice_mut(r);
                        for (o, &gvv) in or.iter_mut().zip(gr) {
                            *o += gvv * s;
                        }
                    }
                }
                let gv = self.ensure_grad(*v);
                for r in 0..g.rows {
                    let dot: f64 = g
                        .row_slice(r)
                        .iter()
                        .zip(mv.row_slice(r))
                        .map(|(&gvv, &mvv)| gvv * mvv)
                        .sum();
                    gv.data[r] += dot;
                }
            }
            Op::AddRowAt { m, v, rows } => {
                self.ensure_grad(*m).add_assign(&g);
                let gv = self.ensure_grad(*v);
                for &r in rows {
                    for (o, &gvv) in gv.data.iter_mut().zip(g.row_slice(r)) {
                        *o += gvv;
                    }
                }
            }
            Op::SubScalarBc(m, s) => {
                self.ensure_grad(*m).add_assign(&g);
                let gs = self.ensure_grad(*s);
                gs.data[0] -= g.data.iter().sum::<f64>();
            }
            Op::RotatePairs { src, cos, sin } => {
                let gs = self.ensure_grad(*src);
                let half = cos.cols;
                for r in 0..g.rows {
                    let gr = g.row_slice(r);
                    let or = gs.row_slice_mut(r);
                    for p in 0..half {
                        let (c, s) = (cos.at(r, p), sin.at(r, p));
                        let (g1, g2) = (gr[p], gr[half + p]);
                        // inverse rotation of the upstream gradient
                        or[p] += g1 * c + g2 * s;
                        or[half + p] += -g1 * s + g2 * c;
                    }
                }
            }
            Op::NegMeanPick { logp, targets } => {
                let go = g.data[0];
                let n = targets.len() as f64;
                let gl = self.ensure_grad(*logp);
                for (r, &t) in targets.iter().enumerate() {
                    *gl.at_mut(r, t) -= go / n;
                }
            }
            Op::SumAll(a) => {
                let go = g.data[0];
                let ga = self.ensure_grad(*a);
                for o in ga.data.iter_mut() {
                    *o += go;
                }
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = Some(g);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|)); never -inf for finite x.
#[inline]
pub fn logsigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Node {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        (v.rows, v.cols)
    }

    pub fn scalar(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        assert_eq!((v.rows, v.cols), (1, 1), "scalar() on non-1x1 node");
        v.data[0]
    }

    /// Gradient accumulated by the last backward pass (zeros if unreached).
    pub fn grad(&self) -> Matrix {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.idx];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows, n.value.cols))
    }

    fn with_values<T>(&self, other: &Node, f: impl FnOnce(&Matrix, &Matrix) -> T) -> T {
        let inner = self.tape.inner.borrow();
        f(
            &inner.nodes[self.idx].value,
            &inner.nodes[other.idx].value,
        )
    }

    pub fn add(&self, other: &Node) -> Node {
        let value = self.with_values(other, |a, b| {
            assert!(a.same_shape(b), "add shape mismatch");
            let mut out = a.clone();
            out.add_assign(b);
            out
        });
        self.tape.push(value, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Node) -> Node {
        let value = self.with_values(other, |a, b| {
            assert!(a.same_shape(b), "sub shape mismatch");
            let mut out = a.clone();
            for (o, &bv) in out.data.iter_mut().zip(&b.data) {
                *o -= bv;
            }
            out
        });
        self.tape.push(value, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Node) -> Node {
        let value = self.with_values(other, |a, b| {
            assert!(a.same_shape(b), "mul shape mismatch");
            let mut out = a.clone();
            for (o, &bv) in out.data.iter_mut().zip(&b.data) {
                *o *= bv;
            }
            out
        });
        self.tape.push(value, Op::Mul(self.idx, other.idx))
    }

    pub fn scale(&self, c: f64) -> Node {
        let mut value = self.value();
        value.scale_assign(c);
        self.tape.push(value, Op::Scale(self.idx, c))
    }

    pub fn matmul(&self, other: &Node) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            a.check_matmul(b)?;
            a.matmul(b)
        };
        Ok(self.tape.push(value, Op::Matmul(self.idx, other.idx)))
    }

    pub fn t(&self) -> Node {
        let value = self.value().transpose();
        self.tape.push(value, Op::Transpose(self.idx))
    }

    /// Row-wise softmax with max subtraction. -inf logits map to exactly 0;
    /// a row of all -inf is an error.
    pub fn softmax_rows(&self) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Matrix::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row_slice(r);
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::AllMaskedRow { row: r });
                }
                let or = out.row_slice_mut(r);
                let mut sum = 0.0;
                for (o, &xv) in or.iter_mut().zip(xr) {
                    let e = (xv - max).exp();
                    *o = e;
                    sum += e;
                }
                for o in or.iter_mut() {
                    *o /= sum;
                }
            }
            out
        };
        Ok(self.tape.push(value, Op::SoftmaxRows(self.idx)))
    }

    pub fn log_softmax_rows(&self) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Matrix::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row_slice(r);
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::AllMaskedRow { row: r });
                }
                let sum: f64 = xr.iter().map(|&xv| (xv - max).exp()).sum();
                let lse = max + sum.ln();
                let or = out.row_slice_mut(r);
                for (o, &xv) in or.iter_mut().zip(xr) {
                    *o = xv - lse;
                }
            }
            out
        };
        Ok(self.tape.push(value, Op::LogSoftmaxRows(self.idx)))
    }

    /// Per-column log-sum-exp collapsing all rows into a single row.
    pub fn logsumexp_over_rows(&self) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            if x.rows == 0 {
                return Err(Error::EmptyInput("logsumexp_over_rows"));
            }
            let mut out = Matrix::zeros(1, x.cols);
            for j in 0..x.cols {
                let mut max = f64::NEG_INFINITY;
                for r in 0..x.rows {
                    max = max.max(x.at(r, j));
                }
                out.data[j] = if max == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else if x.rows == 1 {
                    // exact for a single element
                    x.at(0, j)
                } else {
                    let sum: f64 = (0..x.rows).map(|r| (x.at(r, j) - max).exp()).sum();
                    max + sum.ln()
                };
            }
            out
        };
        Ok(self.tape.push(value, Op::LogSumExpOverRows(self.idx)))
    }

    /// Elementwise ln(sigmoid(x)), computed as -softplus(-x).
    pub fn logsigmoid(&self) -> Node {
        let mut value = self.value();
        for v in value.data.iter_mut() {
            *v = logsigmoid_scalar(*v);
        }
        self.tape.push(value, Op::LogSigmoid(self.idx))
    }

    pub fn exp(&self) -> Node {
        let mut value = self.value();
        for v in value.data.iter_mut() {
            *v = v.exp();
        }
        self.tape.push(value, Op::Exp(self.idx))
    }

    pub fn gelu(&self) -> Node {
        let mut value = self.value();
        for v in value.data.iter_mut() {
            *v = gelu_scalar(*v);
        }
        self.tape.push(value, Op::Gelu(self.idx))
    }

    /// Row-wise layer normalization with learned gain and bias (1 x cols).
    pub fn layernorm(&self, gain: &Node, bias: &Node) -> Node {
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let gv = &inner.nodes[gain.idx].value;
            let bv = &inner.nodes[bias.idx].value;
            assert_eq!((gv.rows, gv.cols), (1, x.cols), "layernorm gain shape");
            assert_eq!((bv.rows, bv.cols), (1, x.cols), "layernorm bias shape");
            let mut xhat = Matrix::zeros(x.rows, x.cols);
            let mut inv_std = vec![0.0; x.rows];
            let mut out = Matrix::zeros(x.rows, x.cols);
            let nf = x.cols as f64;
            for r in 0..x.rows {
                let xr = x.row_slice(r);
                let mean = xr.iter().sum::<f64>() / nf;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..x.cols {
                    let xh = (xr[j] - mean) * is;
                    xhat.data[r * x.cols + j] = xh;
                    out.data[r * x.cols + j] = xh * gv.data[j] + bv.data[j];
                }
            }
            (
                out,
                Op::LayerNorm {
                    x: self.idx,
                    gain: gain.idx,
                    bias: bias.idx,
                    xhat,
                    inv_std,
                },
            )
        };
        self.tape.push(value, op)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            assert!(start + len <= x.cols, "slice_cols out of range");
            let mut out = Matrix::zeros(x.rows, len);
            for r in 0..x.rows {
                out.row_slice_mut(r)
                    .copy_from_slice(&x.row_slice(r)[start..start + len]);
            }
            out
        };
        self.tape.push(
            value,
            Op::SliceCols {
                src: self.idx,
                start,
            },
        )
    }

    /// Add a 1 x cols row vector to every row.
    pub fn add_row(&self, v: &Node) -> Node {
        let value = self.with_values(v, |m, vv| {
            assert_eq!((vv.rows, vv.cols), (1, m.cols), "add_row shape");
            let mut out = m.clone();
            for r in 0..m.rows {
                for (o, &x) in out.row_slice_mut(r).iter_mut().zip(&vv.data) {
                    *o += x;
                }
            }
            out
        });
        self.tape.push(value, Op::AddRowBroadcast(self.idx, v.idx))
    }

    /// Add a rows x 1 column vector to every column.
    pub fn add_col(&self, v: &Node) -> Node {
        let value = self.with_values(v, |m, vv| {
            assert_eq!((vv.rows, vv.cols), (m.rows, 1), "add_col shape");
            let mut out = m.clone();
            for r in 0..m.rows {
                let c = vv.data[r];
                for o in out.row_slice_mut(r) {
                    *o += c;
                }
            }
            out
        });
        self.tape.push(value, Op::AddColBroadcast(self.idx, v.idx))
    }

    /// Multiply row i by v[i] (v is rows x 1).
    pub fn scale_rows_by(&self, v: &Node) -> Node {
        let value = self.with_values(v, |m, vv| {
            assert_eq!((vv.rows, vv.cols), (m.rows, 1), "scale_rows shape");
            let mut out = m.clone();
            for r in 0..m.rows {
                let c = vv.data[r];
                for o in out.row_slice_mut(r) {
                    *o *= c;
                }
            }
            out
        });
        self.tape.push(value, Op::ScaleRows(self.idx, v.idx))
    }

    /// Add row vector v to the listed rows only.
    pub fn add_row_at(&self, v: &Node, rows: &[usize]) -> Node {
        let value = self.with_values(v, |m, vv| {
            assert_eq!((vv.rows, vv.cols), (1, m.cols), "add_row_at shape");
            let mut out = m.clone();
            for &r in rows {
                for (o, &x) in out.row_slice_mut(r).iter_mut().zip(&vv.data) {
                    *o += x;
                }
            }
            out
        });
        self.tape.push(
            value,
            Op::AddRowAt {
                m: self.idx,
                v: v.idx,
                rows: rows.to_vec(),
            },
        )
    }

    /// Subtract a 1x1 scalar node, broadcast over all entries.
    pub fn sub_scalar_bc(&self, s: &Node) -> Node {
        let value = self.with_values(s, |m, sv| {
            assert_eq!((sv.rows, sv.cols), (1, 1), "sub_scalar_bc scalar shape");
            let mut out = m.clone();
            let c = sv.data[0];
            for o in out.data.iter_mut() {
                *o -= c;
            }
            out
        });
        self.tape.push(value, Op::SubScalarBc(self.idx, s.idx))
    }

    /// Half-split rotary rotation: pair (j, j + cols/2) of row r is rotated by
    /// angle positions[r] * theta_base^(-2j/cols).
    pub fn rotate_pairs(&self, positions: &[f64], theta_base: f64) -> Node {
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            assert_eq!(x.rows, positions.len(), "rotate_pairs positions length");
            assert_eq!(x.cols % 2, 0, "rotate_pairs needs an even width");
            let half = x.cols / 2;
            let freqs: Vec<f64> = (0..half)
                .map(|j| theta_base.powf(-2.0 * j as f64 / x.cols as f64))
                .collect();
            let mut cos = Matrix::zeros(x.rows, half);
            let mut sin = Matrix::zeros(x.rows, half);
            let mut out = Matrix::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row_slice(r);
                let or = out.row_slice_mut(r);
                for (p, &f) in freqs.iter().enumerate() {
                    let ang = positions[r] * f;
                    let (s, c) = ang.sin_cos();
                    cos.data[r * half + p] = c;
                    sin.data[r * half + p] = s;
                    let (x1, x2) = (xr[p], xr[half + p]);
                    or[p] = x1 * c - x2 * s;
                    or[half + p] = x1 * s + x2 * c;
                }
            }
            (
                out,
                Op::RotatePairs {
                    src: self.idx,
                    cos,
                    sin,
                },
            )
        };
        self.tape.push(value, op)
    }

    /// Cross-entropy from log-probabilities: -(1/n) sum of picked entries.
    pub fn neg_mean_pick(&self, targets: &[usize]) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            assert_eq!(x.rows, targets.len(), "neg_mean_pick target count");
            let mut acc = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                assert!(t < x.cols, "target {t} out of vocab {}", x.cols);
                acc += x.at(r, t);
            }
            Matrix::from_vec(1, 1, vec![-acc / targets.len() as f64])
        };
        self.tape.push(
            value,
            Op::NegMeanPick {
                logp: self.idx,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum_all(&self) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            Matrix::from_vec(1, 1, vec![x.data.iter().sum()])
        };
        self.tape.push(value, Op::SumAll(self.idx))
    }
}
