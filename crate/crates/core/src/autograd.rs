//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is applied; [`Graph::backward`]
//! then walks the recorded nodes once in reverse topological order and
//! accumulates gradients into every tensor that was inserted with
//! `requires_grad`. Nodes are append-only and inputs always precede their
//! consumers, so insertion order is already a topological order.
//!
//! Conventions:
//! * tensors are 1-D or 2-D, row-major, 64-bit floats;
//! * a "scalar" is any tensor with exactly one element;
//! * every successful operation yields only finite values — an op whose
//!   output would contain NaN or infinity fails instead;
//! * the subgradient of `|x|` at `x = 0` is 0.

use crate::{Error, Result};

/// A dense tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the value count and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::BadShape {
                op: "tensor",
                expected: format!("{} values", shape.iter().product::<usize>()),
                got: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf; backward will fill its gradient.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, present after a backward pass reached this node.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => unreachable!(),
        }
    }

    fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => unreachable!(),
        }
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    LogAddExp(NodeId, NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { input: NodeId, axis: usize, start: usize, end: usize },
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    SquaredNorm(NodeId),
    L1Distance(NodeId, NodeId),
    EmbeddingLookup { table: NodeId, indices: Vec<usize> },
    Transpose(NodeId),
}

/// How the right operand of an elementwise op is expanded to the left shape.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    /// rhs is a scalar applied to every element of lhs.
    ScalarRhs,
    /// lhs is a scalar applied to every element of rhs.
    ScalarLhs,
    /// rhs is a `[n]` vector added to every row of an `[m, n]` lhs.
    Row,
    /// rhs is an `[m, 1]` column added to every column of an `[m, n]` lhs.
    Col,
}

struct Node {
    op: Op,
    tensor: Tensor,
}

/// A recorded computation: an append-only, topologically ordered node list.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, tensor)
    }

    /// Leaf holding a single constant that never receives a gradient.
    pub fn constant(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.leaf(Tensor::scalar(v)?))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient accumulated on a node by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, op: Op, tensor: Tensor) -> NodeId {
        self.nodes.push(Node { op, tensor });
        NodeId(self.nodes.len() - 1)
    }

    fn result(&mut self, op_name: &'static str, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = requires_grad;
        Ok(self.push(op, t))
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.value(*id).requires_grad)
    }

    // ── Elementwise and linear-algebra ops ──────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`; a 1-D lhs is treated as a single row.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.values[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let shape = if ta.shape.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.needs_grad(&[a, b]);
        self.result("matmul", Op::MatMul(a, b), shape, out, rg)
    }

    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            return Ok(Broadcast::None);
        }
        if tb.is_scalar() {
            return Ok(Broadcast::ScalarRhs);
        }
        if ta.is_scalar() {
            return Ok(Broadcast::ScalarLhs);
        }
        if ta.shape.len() == 2
            && ((tb.shape.len() == 1 && tb.shape[0] == ta.shape[1])
                || (tb.shape.len() == 2 && tb.shape[0] == 1 && tb.shape[1] == ta.shape[1]))
        {
            return Ok(Broadcast::Row);
        }
        if ta.shape.len() == 2 && tb.shape.len() == 2 && tb.shape[0] == ta.shape[0] && tb.shape[1] == 1 {
            return Ok(Broadcast::Col);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape.clone(),
            rhs: tb.shape.clone(),
        })
    }

    fn broadcast_apply(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(Broadcast) -> Op,
    ) -> Result<NodeId> {
        let bc = self.broadcast_kind(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, values) = match bc {
            Broadcast::None => (
                ta.shape.clone(),
                ta.values.iter().zip(&tb.values).map(|(x, y)| f(*x, *y)).collect(),
            ),
            Broadcast::ScalarRhs => {
                let s = tb.values[0];
                (ta.shape.clone(), ta.values.iter().map(|x| f(*x, s)).collect())
            }
            Broadcast::ScalarLhs => {
                let s = ta.values[0];
                (tb.shape.clone(), tb.values.iter().map(|y| f(s, *y)).collect())
            }
            Broadcast::Row => {
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(f(ta.values[i * n + j], tb.values[j]));
                    }
                }
                (ta.shape.clone(), out)
            }
            Broadcast::Col => {
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(f(ta.values[i * n + j], tb.values[i]));
                    }
                }
                (ta.shape.clone(), out)
            }
        };
        let rg = self.needs_grad(&[a, b]);
        self.result(op_name, make_op(bc), shape, values, rg)
    }

    /// Elementwise addition; also accepts a row `[n]`, a column `[m, 1]`, or
    /// a scalar as the right operand of an `[m, n]` left operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_apply("add", a, b, |x, y| x + y, |bc| Op::Add(a, b, bc))
    }

    /// Elementwise product; either side may be a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = self.broadcast_kind("mul", a, b)?;
        if matches!(bc, Broadcast::Row | Broadcast::Col) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        self.broadcast_apply("mul", a, b, |x, y| x * y, |bc| Op::Mul(a, b, bc))
    }

    /// Multiplies by a compile-time constant (recorded as a no-grad leaf).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(c)?;
        self.mul(a, k)
    }

    /// `a - b`, composed as `a + (-1) * b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let ta = self.value(a);
        let values = ta.values.iter().map(|x| f(*x)).collect();
        let shape = ta.shape.clone();
        let rg = ta.requires_grad;
        self.result(op_name, op, shape, values, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Row-wise softmax (whole vector for 1-D input), computed with
    /// max-subtraction so large logits stay in range.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if cols == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "at least one column".into(),
                got: ta.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &ta.values[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
        let shape = ta.shape.clone();
        let rg = ta.requires_grad;
        self.result("softmax", Op::Softmax(a), shape, out, rg)
    }

    /// Elementwise `log(exp(a) + exp(b))`, evaluated in a form that cannot
    /// overflow for finite inputs.
    pub fn logaddexp(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "logaddexp",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let values = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| {
                let m = x.max(*y);
                m + ((x - m).exp() + (y - m).exp()).ln()
            })
            .collect();
        let shape = ta.shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.result("logaddexp", Op::LogAddExp(a, b), shape, values, rg)
    }

    /// Concatenates along `axis` (0 or, for 2-D inputs, 1).
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat: no inputs".into()));
        }
        let first = self.value(parts[0]).shape.clone();
        let ndim = first.len();
        if axis >= ndim {
            return Err(Error::BadShape {
                op: "concat",
                expected: format!("axis < {ndim}"),
                got: vec![axis],
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = &self.value(*p).shape;
            if s.len() != ndim || (0..ndim).any(|d| d != axis && s[d] != first[d]) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let values = if axis == 0 || ndim == 1 {
            let mut v = Vec::new();
            for p in parts {
                v.extend_from_slice(&self.value(*p).values);
            }
            v
        } else {
            let rows = first[0];
            let mut v = Vec::with_capacity(out_shape.iter().product());
            for r in 0..rows {
                for p in parts {
                    let t = self.value(*p);
                    let n = t.shape[1];
                    v.extend_from_slice(&t.values[r * n..(r + 1) * n]);
                }
            }
            v
        };
        let rg = self.needs_grad(parts);
        self.result(
            "concat",
            Op::Concat { axis, parts: parts.to_vec() },
            out_shape,
            values,
            rg,
        )
    }

    /// Takes the half-open range `start..end` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(input);
        let ndim = t.shape.len();
        if axis >= ndim || start > end || end > t.shape[axis] {
            return Err(Error::BadShape {
                op: "slice",
                expected: format!("range within axis {} of {:?}", axis, t.shape),
                got: vec![start, end],
            });
        }
        let (shape, values) = if ndim == 1 || axis == 0 {
            let cols = if ndim == 1 { 1 } else { t.shape[1] };
            let vals = t.values[start * cols..end * cols].to_vec();
            let mut s = t.shape.clone();
            s[0] = end - start;
            (s, vals)
        } else {
            let (rows, cols) = (t.shape[0], t.shape[1]);
            let mut vals = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                vals.extend_from_slice(&t.values[r * cols + start..r * cols + end]);
            }
            (vec![rows, end - start], vals)
        };
        let rg = t.requires_grad;
        self.result("slice", Op::Slice { input, axis, start, end }, shape, values, rg)
    }

    /// Single element of a 2-D tensor as a scalar node.
    pub fn pick(&mut self, input: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let r = self.slice(input, 0, row, row + 1)?;
        let c = self.slice(r, 1, col, col + 1)?;
        // flatten [1,1] to a scalar by summing
        self.sum(c)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let s: f64 = ta.values.iter().sum();
        let rg = ta.requires_grad;
        self.result("sum", Op::Sum(a), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.values.is_empty() {
            return Err(Error::Invalid("mean: empty tensor".into()));
        }
        let s: f64 = ta.values.iter().sum::<f64>() / ta.values.len() as f64;
        let rg = ta.requires_grad;
        self.result("mean", Op::Mean(a), vec![1], vec![s], rg)
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let s: f64 = ta.values.iter().map(|x| x.abs()).sum();
        let rg = ta.requires_grad;
        self.result("l1_norm", Op::L1Norm(a), vec![1], vec![s], rg)
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let s: f64 = ta.values.iter().map(|x| x * x).sum();
        let rg = ta.requires_grad;
        self.result("squared_norm", Op::SquaredNorm(a), vec![1], vec![s], rg)
    }

    /// `sum |a_i - b_i|` with subgradient 0 at exact ties.
    pub fn l1_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "l1_distance",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let s: f64 = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.needs_grad(&[a, b]);
        self.result("l1_distance", Op::L1Distance(a, b), vec![1], vec![s], rg)
    }

    /// Gathers rows of `table` at `indices`; gradients scatter back into the
    /// table rows.
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding_lookup",
                expected: "2-D table".into(),
                got: t.shape.clone(),
            });
        }
        let (v, h) = (t.shape[0], t.shape[1]);
        let mut values = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange { index: i, size: v });
            }
            values.extend_from_slice(&t.values[i * h..(i + 1) * h]);
        }
        let rg = t.requires_grad;
        self.result(
            "embedding_lookup",
            Op::EmbeddingLookup { table, indices: indices.to_vec() },
            vec![indices.len(), h],
            values,
            rg,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "2-D input".into(),
                got: ta.shape.clone(),
            });
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.values[i * n + j];
            }
        }
        let rg = ta.requires_grad;
        self.result("transpose", Op::Transpose(a), vec![n, m], out, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every `requires_grad` node.
    ///
    /// A leaf consumed on several paths receives the sum of all path
    /// gradients. Repeated backward calls keep accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::LossNotScalar(self.value(loss).shape.clone()));
        }
        let n = self.nodes.len();
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; n];
        bufs[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gout) = bufs[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut bufs);
            let t = &mut self.nodes[i].tensor;
            match &mut t.grad {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&gout) {
                        *a += b;
                    }
                }
                None => t.grad = Some(gout),
            }
        }
        Ok(())
    }

    fn accum(&self, bufs: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].tensor.requires_grad {
            return;
        }
        let buf = bufs[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].tensor.numel()]);
        contrib(buf);
    }

    fn propagate(&self, i: usize, gout: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        let out = &self.nodes[i].tensor;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
                self.accum(bufs, a, |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[r * n + j] * tb.values[p * n + j];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                self.accum(bufs, b, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += ta.values[r * k + p] * gout[r * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Add(a, b, bc) => {
                self.accum(bufs, a, |ga| match bc {
                    Broadcast::ScalarLhs => ga[0] += gout.iter().sum::<f64>(),
                    _ => {
                        for (g, go) in ga.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                });
                let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                self.accum(bufs, b, |gb| match bc {
                    Broadcast::None => {
                        for (g, go) in gb.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                    Broadcast::ScalarRhs => gb[0] += gout.iter().sum::<f64>(),
                    Broadcast::ScalarLhs => {
                        for (g, go) in gb.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                    Broadcast::Row => {
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += gout[r * cols + c];
                            }
                        }
                    }
                    Broadcast::Col => {
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[r] += gout[r * cols + c];
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(bufs, a, |ga| match bc {
                    Broadcast::None => {
                        for ((g, go), y) in ga.iter_mut().zip(gout).zip(&tb.values) {
                            *g += go * y;
                        }
                    }
                    Broadcast::ScalarRhs => {
                        let s = tb.values[0];
                        for (g, go) in ga.iter_mut().zip(gout) {
                            *g += go * s;
                        }
                    }
                    Broadcast::ScalarLhs => {
                        ga[0] += gout.iter().zip(&tb.values).map(|(go, y)| go * y).sum::<f64>();
                    }
                    _ => unreachable!(),
                });
                self.accum(bufs, b, |gb| match bc {
                    Broadcast::None => {
                        for ((g, go), x) in gb.iter_mut().zip(gout).zip(&ta.values) {
                            *g += go * x;
                        }
                    }
                    Broadcast::ScalarRhs => {
                        gb[0] += gout.iter().zip(&ta.values).map(|(go, x)| go * x).sum::<f64>();
                    }
                    Broadcast::ScalarLhs => {
                        let s = ta.values[0];
                        for (g, go) in gb.iter_mut().zip(gout) {
                            *g += go * s;
                        }
                    }
                    _ => unreachable!(),
                });
            }
            Op::Tanh(a) => self.accum(bufs, a, |ga| {
                for ((g, go), y) in ga.iter_mut().zip(gout).zip(&out.values) {
                    *g += go * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => self.accum(bufs, a, |ga| {
                for ((g, go), y) in ga.iter_mut().zip(gout).zip(&out.values) {
                    *g += go * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let ta = self.value(a);
                self.accum(bufs, a, |ga| {
                    for ((g, go), x) in ga.iter_mut().zip(gout).zip(&ta.values) {
                        if *x > 0.0 {
                            *g += go;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                self.accum(bufs, a, |ga| {
                    for r in 0..rows {
                        let y = &out.values[r * cols..(r + 1) * cols];
                        let go = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(go).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (go[c] - dot);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ta = self.value(a);
                self.accum(bufs, a, |ga| {
                    for ((g, go), x) in ga.iter_mut().zip(gout).zip(&ta.values) {
                        *g += go / x;
                    }
                })
            }
            Op::Exp(a) => self.accum(bufs, a, |ga| {
                for ((g, go), y) in ga.iter_mut().zip(gout).zip(&out.values) {
                    *g += go * y;
                }
            }),
            Op::LogAddExp(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(bufs, a, |ga| {
                    for (((g, go), x), z) in ga.iter_mut().zip(gout).zip(&ta.values).zip(&out.values) {
                        *g += go * (x - z).exp();
                    }
                });
                self.accum(bufs, b, |gb| {
                    for (((g, go), y), z) in gb.iter_mut().zip(gout).zip(&tb.values).zip(&out.values) {
                        *g += go * (y - z).exp();
                    }
                });
            }
            Op::Concat { axis, parts } => {
                if axis == 0 || out.shape.len() == 1 {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(p).numel();
                        self.accum(bufs, p, |gp| {
                            for (g, go) in gp.iter_mut().zip(&gout[offset..offset + n]) {
                                *g += go;
                            }
                        });
                        offset += n;
                    }
                } else {
                    let rows = out.shape[0];
                    let out_cols = out.shape[1];
                    let mut col_off = 0;
                    for p in parts {
                        let n = self.value(p).shape[1];
                        self.accum(bufs, p, |gp| {
                            for r in 0..rows {
                                for c in 0..n {
                                    gp[r * n + c] += gout[r * out_cols + col_off + c];
                                }
                            }
                        });
                        col_off += n;
                    }
                }
            }
            Op::Slice { input, axis, start, end } => {
                let t = self.value(input);
                let ndim = t.shape.len();
                if ndim == 1 || axis == 0 {
                    let cols = if ndim == 1 { 1 } else { t.shape[1] };
                    self.accum(bufs, input, |gi| {
                        for (g, go) in gi[start * cols..end * cols].iter_mut().zip(gout) {
                            *g += go;
                        }
                    });
                } else {
                    let (rows, cols) = (t.shape[0], t.shape[1]);
                    let w = end - start;
                    self.accum(bufs, input, |gi| {
                        for r in 0..rows {
                            for c in 0..w {
                                gi[r * cols + start + c] += gout[r * w + c];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => self.accum(bufs, a, |ga| {
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accum(bufs, a, |ga| {
                    for g in ga.iter_mut() {
                        *g += gout[0] / n;
                    }
                })
            }
            Op::L1Norm(a) => {
                let ta = self.value(a);
                self.accum(bufs, a, |ga| {
                    for (g, x) in ga.iter_mut().zip(&ta.values) {
                        *g += gout[0] * sign0(*x);
                    }
                })
            }
            Op::SquaredNorm(a) => {
                let ta = self.value(a);
                self.accum(bufs, a, |ga| {
                    for (g, x) in ga.iter_mut().zip(&ta.values) {
                        *g += gout[0] * 2.0 * x;
                    }
                })
            }
            Op::L1Distance(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(bufs, a, |ga| {
                    for ((g, x), y) in ga.iter_mut().zip(&ta.values).zip(&tb.values) {
                        *g += gout[0] * sign0(x - y);
                    }
                });
                self.accum(bufs, b, |gb| {
                    for ((g, x), y) in gb.iter_mut().zip(&ta.values).zip(&tb.values) {
                        *g -= gout[0] * sign0(x - y);
                    }
                });
            }
            Op::EmbeddingLookup { table, indices } => {
                let h = self.value(table).shape[1];
                self.accum(bufs, table, |gt| {
                    for (row, &idx) in indices.iter().enumerate() {
                        for c in 0..h {
                            gt[idx * h + c] += gout[row * h + c];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape[0], out.shape[1]);
                self.accum(bufs, a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += gout[i * m + j];
                        }
                    }
                });
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, values).unwrap().requires_grad())
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tanh_matches_scalar_math() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1], vec![0.5]);
        let t = g.tanh(a).unwrap();
        assert_eq!(g.value(t).item(), 0.5_f64.tanh());
        assert!((g.value(t).item() - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(w, w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 7.0]);
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn l1_distance_basics() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let d = g.l1_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 0.0);

        let c = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let d2 = g.l1_distance(a, c).unwrap();
        assert_eq!(g.value(d2).item(), 3.0);
    }

    #[test]
    fn l1_distance_gradient_away_from_ties() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, -1.0]);
        let b = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let d = g.l1_distance(a, b).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, -1.0]);
        assert_eq!(g.grad(b).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0; 4]);
        let b = leaf(&mut g, vec![3, 2], vec![1.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1], vec![0.0]);
        assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(a), Err(Error::LossNotScalar(_))));
    }

    #[test]
    fn duplicated_input_accumulates_both_paths() {
        // f(w) = sum(w + w) vs f(w) = sum(2w)
        let mut g1 = Graph::new();
        let w1 = leaf(&mut g1, vec![3], vec![1.0, -0.5, 2.0]);
        let s1 = g1.add(w1, w1).unwrap();
        let l1 = g1.sum(s1).unwrap();
        g1.backward(l1).unwrap();

        let mut g2 = Graph::new();
        let w2 = leaf(&mut g2, vec![3], vec![1.0, -0.5, 2.0]);
        let s2 = g2.scale(w2, 2.0).unwrap();
        let l2 = g2.sum(s2).unwrap();
        g2.backward(l2).unwrap();

        assert_eq!(g1.grad(w1).unwrap(), g2.grad(w2).unwrap());
        assert_eq!(g1.grad(w1).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(w, w).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[12.0]);
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let a = leaf(&mut g, vec![2, 3], vec![0.3, -1.7, 2.2, 0.9, -0.4, 1.1]);
            let b = leaf(&mut g, vec![3, 2], vec![1.3, 0.7, -0.2, 0.5, 2.0, -1.1]);
            let m = g.matmul(a, b).unwrap();
            let t = g.tanh(m).unwrap();
            let s = g.softmax(t).unwrap();
            let l = g.mean(s).unwrap();
            g.backward(l).unwrap();
            (
                g.value(l).item().to_bits(),
                g.grad(a).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    // ── Finite-difference checks per op ────────────────────────────────

    /// Central finite difference of `f` at `x`, perturbing one coordinate.
    fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] -= 2.0 * h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d < 1e-9 {
            return 0.0;
        }
        d / a.abs().max(b.abs()).max(1e-8)
    }

    /// Checks the analytic gradient of `build` (a scalar-valued graph over a
    /// single input tensor) against central finite differences.
    fn check_grad(shape: Vec<usize>, x: Vec<f64>, build: fn(&mut Graph, NodeId) -> NodeId) {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(shape.clone(), x.clone()).unwrap().requires_grad());
        let out = build(&mut g, a);
        g.backward(out).unwrap();
        let analytic = g.grad(a).unwrap().to_vec();

        let mut eval = |vals: &[f64]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(shape.clone(), vals.to_vec()).unwrap());
            let out = build(&mut g, a);
            g.value(out).item()
        };
        for i in 0..x.len() {
            let fd = central_diff(&mut eval, &x, i, 1e-5);
            assert!(
                rel_err(analytic[i], fd) < 1e-4,
                "coord {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn finite_difference_unary_chain() {
        // exercises tanh, sigmoid, exp, log, softmax, mean in one composition
        check_grad(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, -0.4, 0.2], |g, a| {
            let t = g.tanh(a).unwrap();
            let s = g.sigmoid(t).unwrap();
            let sm = g.softmax(s).unwrap();
            let lg = g.log(sm).unwrap();
            let e = g.exp(lg).unwrap();
            g.mean(e).unwrap()
        });
    }

    #[test]
    fn finite_difference_matmul_transpose() {
        check_grad(vec![2, 3], vec![0.5, -0.7, 1.1, 0.2, 0.9, -1.3], |g, a| {
            let at = g.transpose(a).unwrap();
            let m = g.matmul(a, at).unwrap();
            let sq = g.squared_norm(m).unwrap();
            let l1 = g.l1_norm(m).unwrap();
            let s = g.add(sq, l1).unwrap();
            g.sum(s).unwrap()
        });
    }

    #[test]
    fn finite_difference_logaddexp_slice_concat() {
        check_grad(vec![4], vec![0.4, -0.9, 1.6, 0.1], |g, a| {
            let lo = g.slice(a, 0, 0, 2).unwrap();
            let hi = g.slice(a, 0, 2, 4).unwrap();
            let lae = g.logaddexp(lo, hi).unwrap();
            let cat = g.concat(0, &[lae, lo]).unwrap();
            g.sum(cat).unwrap()
        });
    }

    #[test]
    fn finite_difference_embedding() {
        check_grad(vec![3, 2], vec![0.5, -0.7, 1.1, 0.2, 0.9, -1.3], |g, a| {
            let rows = g.embedding_lookup(a, &[2, 0, 2]).unwrap();
            let sm = g.softmax(rows).unwrap();
            g.squared_norm(sm).unwrap()
        });
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::new();
        let t = leaf(&mut g, vec![2, 2], vec![1.0; 4]);
        assert!(matches!(
            g.embedding_lookup(t, &[2]),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
    }
}
