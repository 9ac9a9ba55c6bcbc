//! Reverse-mode recording of a forward computation over row-batched
//! matrices. Only first-order gradients are supported.

use super::params::{GradRecord, GroupId, ParamSet};
use super::tensor::{axpy, dot, sigmoid_scalar, softmax, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One multi-choice instance inside a stacked logit column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub label: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(GroupId),
    Linear {
        x: Var,
        w: GroupId,
        b: Option<GroupId>,
    },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    Sum(Var),
    SegmentXent {
        logits: Var,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Records operations against an immutable parameter snapshot.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    /// Constant input; never receives gradient.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A whole parameter group as a node.
    pub fn param(&mut self, g: GroupId) -> Var {
        let value = self.params.get(g).clone();
        let ng = self.params.is_trainable(g);
        self.push(value, Op::Param(g), ng)
    }

    /// `x W^T + b` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: GroupId, b: Option<GroupId>) -> Result<Var> {
        let wt = self.params.get(w);
        let xv = self.value(x);
        if xv.cols() != wt.cols() {
            return Err(Error::shape(
                "linear",
                format!("{} input columns", wt.cols()),
                format!("{}", xv.cols()),
            ));
        }
        let (r, m) = (xv.rows(), wt.rows());
        let mut out = Tensor2::zeros(r, m);
        for i in 0..r {
            let xi = xv.row(i);
            let oi = out.row_mut(i);
            for (j, o) in oi.iter_mut().enumerate() {
                *o = dot(wt.row(j), xi);
            }
        }
        if let Some(bg) = b {
            let bt = self.params.get(bg);
            if bt.len() != m {
                return Err(Error::shape("linear bias", m, bt.len()));
            }
            for i in 0..r {
                axpy(out.row_mut(i), 1.0, bt.as_slice());
            }
        }
        let ng = self.needs(x)
            || self.params.is_trainable(w)
            || b.is_some_and(|bg| self.params.is_trainable(bg));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        let ng = self.needs(x);
        self.push(v, Op::Log(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.needs(x);
        self.push(v, Op::AddScalar(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat input"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat_cols", rows, self.value(p).rows()));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("at most {} columns", xv.cols()),
                start + len,
            ));
        }
        let mut out = Tensor2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&softmax(xv.row(r)));
        }
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if row >= xv.rows() || col >= xv.cols() {
            return Err(Error::shape(
                "pick",
                format!("index inside {:?}", xv.shape()),
                format!("({row}, {col})"),
            ));
        }
        let v = Tensor2::scalar(xv.get(row, col));
        let ng = self.needs(x);
        Ok(self.push(v, Op::Pick { x, row, col }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor2::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Mean softmax cross-entropy over instances whose candidate logits are
    /// stacked in the single column `logits`.
    pub fn segment_xent(&mut self, logits: Var, segments: &[Segment]) -> Result<Var> {
        if segments.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let lv = self.value(logits);
        if lv.cols() != 1 {
            return Err(Error::shape("segment_xent", "one logit column", lv.cols()));
        }
        let col = lv.as_slice();
        let mut probs = vec![0.0; col.len()];
        let mut total = 0.0;
        for s in segments {
            if s.start + s.len > col.len() {
                return Err(Error::shape("segment_xent", col.len(), s.start + s.len));
            }
            if s.label >= s.len {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    candidates: s.len,
                });
            }
            let seg = &col[s.start..s.start + s.len];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = seg.iter().map(|&l| (l - max).exp()).sum();
            total += max + sum_exp.ln() - seg[s.label];
            for (i, &l) in seg.iter().enumerate() {
                probs[s.start + i] = (l - max).exp() / sum_exp;
            }
        }
        let loss = total / segments.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor2::scalar(loss),
            Op::SegmentXent {
                logits,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output. Frozen groups keep all-zero
    /// gradient entries.
    pub fn backward(&self, output: Var) -> Result<GradRecord> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads = GradRecord::zeros_like(self.params);
        let mut adj: Vec<Option<Tensor2>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(g) => {
                    if self.params.is_trainable(*g) {
                        grads.get_mut(*g).add_scaled(&dy, 1.0);
                    }
                }
                Op::Linear { x, w, b } => {
                    let wt = self.params.get(*w);
                    let xv = self.value(*x);
                    if self.params.is_trainable(*w) {
                        let gw = grads.get_mut(*w);
                        for i in 0..dy.rows() {
                            let xi = xv.row(i);
                            for (j, &d) in dy.row(i).iter().enumerate() {
                                if d != 0.0 {
                                    axpy(gw.row_mut(j), d, xi);
                                }
                            }
                        }
                    }
                    if let Some(bg) = b {
                        if self.params.is_trainable(*bg) {
                            let gb = grads.get_mut(*bg).as_mut_slice();
                            for i in 0..dy.rows() {
                                axpy(gb, 1.0, dy.row(i));
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                        for i in 0..dy.rows() {
                            let dxi = dx.row_mut(i);
                            for (j, &d) in dy.row(i).iter().enumerate() {
                                if d != 0.0 {
                                    axpy(dxi, d, wt.row(j));
                                }
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Tanh(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| d * (1.0 - y * y));
                    accumulate(&mut adj, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 });
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut adj, *x, dx);
                }
                Op::Log(x) => {
                    let dx = dy.zip_map(self.value(*x), |d, a| d / a);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, dy.map(|d| -d));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, dy.zip_map(self.value(*b), |d, y| d * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, dy.zip_map(self.value(*a), |d, x| d * x));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, dy.zip_map(bv, |d, y| d / y));
                    }
                    if self.needs(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = node.value.zip_map(bv, |q, y| -q / y);
                        accumulate(&mut adj, *b, dy.zip_map(&q, |d, g| d * g));
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut adj, *x, dy.map(|d| d * c));
                }
                Op::AddScalar(x) => accumulate(&mut adj, *x, dy),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.needs(p) {
                            let mut dp = Tensor2::zeros(dy.rows(), pc);
                            for r in 0..dy.rows() {
                                dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + pc]);
                            }
                            accumulate(&mut adj, p, dp);
                        }
                        off += pc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let inner = dot(yr, dr);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (dr[c] - inner);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Pick { x, row, col } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    dx.set(*row, *col, dy.get(0, 0));
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let d = dy.get(0, 0);
                    accumulate(&mut adj, *x, xv.map(|_| d));
                }
                Op::SegmentXent {
                    logits,
                    segments,
                    probs,
                } => {
                    let scale = dy.get(0, 0) / segments.len() as f64;
                    let mut dl = Tensor2::zeros(probs.len(), 1);
                    let dls = dl.as_mut_slice();
                    for s in segments {
                        for i in 0..s.len {
                            let onehot = if i == s.label { 1.0 } else { 0.0 };
                            dls[s.start + i] += scale * (probs[s.start + i] - onehot);
                        }
                    }
                    accumulate(&mut adj, *logits, dl);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], v: Var, d: Tensor2) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}
