//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! The tape is eager: every operation computes its output matrix when it is
//! recorded, so intermediate values (batch statistics, argmax routing) are
//! available while the graph is still being built. Nodes are append-only,
//! which makes node order a valid topological order; the backward pass is a
//! single reverse sweep.
//!
//! A tape and its matrices are a single-owner unit. Parallelism happens above
//! this module (one tape per fold or per batch).

use crate::error::{MilError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a 1xC row to every row of the first input.
    AddRow(NodeId, NodeId),
    /// Broadcast-multiply every row of the first input by a 1xC row.
    MulRow(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    ConcatRows(NodeId, NodeId),
    Reshape(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    /// Column-wise max over rows; routing holds the argmax row per column
    /// (ties broken toward the lowest row index).
    MaxRows(NodeId, Vec<usize>),
    FrobNorm(NodeId),
    /// Softmax cross-entropy of a single logits row against a class index.
    CrossEntropyLogits(NodeId, usize),
    /// Divide each row by its sum (row sums must be positive).
    RowNormalize(NodeId),
    /// Elementwise 1/sqrt(x + eps).
    RsqrtEps(NodeId, f64),
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Matrix,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Matrix::from_vec(1, 1, vec![value]).expect("1x1"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(MilError::Shape(format!(
                "add_row: {}x{} with row {}x{}",
                av.rows(),
                av.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.get(r, c) + rv.get(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(MilError::Shape(format!(
                "mul_row: {}x{} with row {}x{}",
                av.rows(),
                av.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.get(r, c) * rv.get(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(Op::MulRow(a, row), value))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if slope < 0.0 {
            return Err(MilError::Config(format!("negative leaky slope {slope}")));
        }
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        Ok(self.push(Op::LeakyRelu(a, slope), value))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(MilError::Shape(format!(
                "concat_rows: column mismatch {} vs {}",
                av.cols(),
                bv.cols()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data)?;
        Ok(self.push(Op::ConcatRows(a, b), value))
    }

    /// Stack a list of matrices with equal column counts into one tall matrix.
    pub fn concat_rows_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut acc = *ids
            .first()
            .ok_or_else(|| MilError::Shape("concat_rows_all: empty list".into()))?;
        for &id in &ids[1..] {
            acc = self.concat_rows(acc, id)?;
        }
        Ok(acc)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(MilError::Shape(format!(
                "reshape: {}x{} to {}x{}",
                av.rows(),
                av.cols(),
                rows,
                cols
            )));
        }
        let value = Matrix::from_vec(rows, cols, av.data().to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Column means: KxD -> 1xD.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut out = Matrix::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out.set(0, j, out.get(0, j) + av.get(i, j));
            }
        }
        let inv = 1.0 / r as f64;
        for j in 0..c {
            out.set(0, j, out.get(0, j) * inv);
        }
        self.push(Op::MeanRows(a), out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![s]).expect("1x1");
        self.push(Op::SumAll(a), value)
    }

    /// Column-wise max over rows: KxD -> 1xD, gradient routed to the argmax
    /// row of each column (lowest index on ties).
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        assert!(r >= 1, "max_rows on empty matrix");
        let mut out = Matrix::zeros(1, c);
        let mut routing = vec![0usize; c];
        for j in 0..c {
            let mut best = av.get(0, j);
            let mut arg = 0usize;
            for i in 1..r {
                let v = av.get(i, j);
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            out.set(0, j, best);
            routing[j] = arg;
        }
        self.push(Op::MaxRows(a, routing), out)
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).frobenius_norm();
        let value = Matrix::from_vec(1, 1, vec![n]).expect("1x1");
        self.push(Op::FrobNorm(a), value)
    }

    /// Softmax cross-entropy with logits for one sample. `logits` must be a
    /// single row; `label` indexes its columns.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(MilError::Shape(format!(
                "cross_entropy_logits expects a 1xC row, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if label >= lv.cols() {
            return Err(MilError::Shape(format!(
                "label {} out of range for {} classes",
                label,
                lv.cols()
            )));
        }
        let row = lv.row(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
        let loss = log_sum - row[label];
        let value = Matrix::from_vec(1, 1, vec![loss]).expect("1x1");
        Ok(self.push(Op::CrossEntropyLogits(logits, label), value))
    }

    /// Divide each row by its sum. Row sums must be strictly positive.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut value = av.clone();
        for i in 0..r {
            let s: f64 = av.row(i).iter().sum();
            if s <= 0.0 {
                return Err(MilError::Shape(format!(
                    "row_normalize: row {i} has non-positive sum {s}"
                )));
            }
            for j in 0..c {
                value.set(i, j, av.get(i, j) / s);
            }
        }
        Ok(self.push(Op::RowNormalize(a), value))
    }

    pub fn rsqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        self.push(Op::RsqrtEps(a, eps), value)
    }

    /// Seed the scalar root with gradient 1 and sweep the tape in reverse.
    /// A second call without [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(MilError::Tape(
                "backward called twice without reset_grads".into(),
            ));
        }
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(MilError::Tape(format!(
                "backward root must be 1x1, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        self.nodes[root.0].grad.set(0, 0, 1.0);
        for idx in (0..=root.0).rev() {
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&g)?;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg = g.map(|x| -x);
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
                    let db = g.zip_map(&self.nodes[a.0].value, |x, y| x * y)?;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, c) => {
                    let da = g.map(|x| c * x);
                    self.accumulate(a, &da);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, &g);
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dr.set(0, c, dr.get(0, c) + g.get(r, c));
                        }
                    }
                    self.accumulate(row, &dr);
                }
                Op::MulRow(a, row) => {
                    let av = &self.nodes[a.0].value;
                    let rv = &self.nodes[row.0].value;
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(r, c, g.get(r, c) * rv.get(0, c));
                            dr.set(0, c, dr.get(0, c) + g.get(r, c) * av.get(r, c));
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(row, &dr);
                }
                Op::LeakyRelu(a, slope) => {
                    // subgradient at exactly 0 is the negative slope
                    let da = g.zip_map(&self.nodes[a.0].value, |gx, x| {
                        if x > 0.0 {
                            gx
                        } else {
                            slope * gx
                        }
                    })?;
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = (0..g.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..g.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].value.rows();
                    let cols = g.cols();
                    let da = Matrix::from_vec(ra, cols, g.data()[..ra * cols].to_vec())?;
                    let db = Matrix::from_vec(g.rows() - ra, cols, g.data()[ra * cols..].to_vec())?;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Reshape(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Matrix::from_vec(av.rows(), av.cols(), g.data().to_vec())?;
                    self.accumulate(a, &da);
                }
                Op::MeanRows(a) => {
                    let r = self.nodes[a.0].value.rows();
                    let inv = 1.0 / r as f64;
                    let mut da = Matrix::zeros(r, g.cols());
                    for i in 0..r {
                        for c in 0..g.cols() {
                            da.set(i, c, g.get(0, c) * inv);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let da = Matrix::filled(
                        self.nodes[a.0].value.rows(),
                        self.nodes[a.0].value.cols(),
                        g.get(0, 0),
                    );
                    self.accumulate(a, &da);
                }
                Op::MaxRows(a, routing) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (c, &arg) in routing.iter().enumerate() {
                        da.set(arg, c, g.get(0, c));
                    }
                    self.accumulate(a, &da);
                }
                Op::FrobNorm(a) => {
                    let n = self.nodes[idx].value.get(0, 0);
                    if n > 0.0 {
                        let scale = g.get(0, 0) / n;
                        let da = self.nodes[a.0].value.map(|x| scale * x);
                        self.accumulate(a, &da);
                    }
                }
                Op::CrossEntropyLogits(a, label) => {
                    let probs = softmax_rows_value(&self.nodes[a.0].value);
                    let g0 = g.get(0, 0);
                    let mut da = probs.map(|p| g0 * p);
                    da.set(0, label, da.get(0, label) - g0);
                    self.accumulate(a, &da);
                }
                Op::RowNormalize(a) => {
                    let av = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let s: f64 = av.row(r).iter().sum();
                        let dot: f64 = (0..av.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..av.cols() {
                            da.set(r, c, (g.get(r, c) - dot) / s);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::RsqrtEps(a, _eps) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip_map(&y.map(|v| -0.5 * v * v * v), |gx, d| gx * d)?;
                    self.accumulate(a, &da);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            for v in node.grad.data_mut() {
                *v = 0.0;
            }
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: NodeId, delta: &Matrix) {
        let grad = &mut self.nodes[id.0].grad;
        debug_assert_eq!(grad.shape(), delta.shape());
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
