//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding the
//! computed value plus the op and its input ids. Input ids always precede
//! the output id, so [`Graph::backward`] walks the tape once in reverse,
//! applying each op's adjoint. Nodes reachable only from constants carry
//! `needs_grad = false` and are skipped entirely.
//!
//! Non-smooth choices made elsewhere (top-k selection indices) enter the
//! tape as fixed `gather` indices, whose adjoint is a scatter-add; the
//! selection itself is treated as locally constant.

use super::{matmul_into, matmul_nt_into, matmul_tn_into, Array};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    /// Numerically stable log(1 + e^x).
    Log1pExp(NodeId),
    Relu(NodeId),
    RowSoftmax(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    Slice {
        input: NodeId,
        r0: usize,
        c0: usize,
    },
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    ReduceSum(NodeId),
    ReduceMean(NodeId),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// The adjoint of `id`, if the node required gradients and was reached
    /// from the loss. Unreached or constant nodes return `None`.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; nothing downstream of only constants is
    /// revisited during backward.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Dim(format!(
                "matmul shape mismatch: {ar}x{ac} @ {br}x{bc}"
            )));
        }
        let mut out = Array::zeros(ar, bc);
        matmul_into(self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            let (ar, ac) = self.value(a).shape();
            let (br, bc) = self.value(b).shape();
            return Err(Error::Dim(format!(
                "{name} shape mismatch: {ar}x{ac} vs {br}x{bc}"
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::from_vec(va.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("ln of a non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// log(1 + e^x) computed as max(x, 0) + log1p(e^{-|x|}).
    pub fn log1p_exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Log1pExp(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax; each output row is strictly positive and sums to 1.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Stack inputs vertically; all inputs must share a column count.
    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Dim("concat_rows of zero inputs".into()));
        }
        let cols = self.value(inputs[0]).cols();
        let mut rows = 0;
        for &id in inputs {
            if self.value(id).cols() != cols {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {} vs {}",
                    self.value(id).cols(),
                    cols
                )));
            }
            rows += self.value(id).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let ng = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Array::from_vec(rows, cols, data),
            Op::ConcatRows(inputs.to_vec()),
            ng,
        ))
    }

    /// The block `[r0..r1) x [c0..c1)` of `a`.
    pub fn slice(&mut self, a: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if r0 >= r1 || c0 >= c1 || r1 > rows || c1 > cols {
            return Err(Error::Dim(format!(
                "slice [{r0}..{r1}) x [{c0}..{c1}) out of bounds for {rows}x{cols}"
            )));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            data.extend_from_slice(&v.row(r)[c0..c1]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Array::from_vec(r1 - r0, c1 - c0, data),
            Op::Slice { input: a, r0, c0 },
        ng,
        ))
    }

    /// Selected entries of `a` by flat row-major index, as a 1 x m row.
    /// The indices are fixed constants; the adjoint scatter-adds into them.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if indices.iter().any(|&i| i >= v.len()) {
            return Err(Error::Dim(format!(
                "gather index out of bounds for {} entries",
                v.len()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        let ng = self.needs(a);
        Ok(self.push(
            Array::from_vec(1, indices.len(), data),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Array::scalar(s), Op::ReduceSum(a), ng)
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Array::scalar(s / n), Op::ReduceMean(a), ng)
    }

    /// Reverse pass from a scalar loss node. Returns adjoints for every
    /// gradient-requiring node on a path from a differentiable leaf to the
    /// loss; parameters off every path simply never receive an adjoint.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_adjoint(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_adjoint(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let slot = ensure(grads, a.0, self.value(*a).shape());
                    matmul_nt_into(g, self.value(*b), slot);
                }
                if self.needs(*b) {
                    let slot = ensure(grads, b.0, self.value(*b).shape());
                    matmul_tn_into(self.value(*a), g, slot);
                }
            }
            Op::Add(a, b) => {
                self.acc_mapped(grads, *a, g, |gi, _| gi);
                self.acc_mapped(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_mapped(grads, *a, g, |gi, _| gi);
                self.acc_mapped(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    self.acc_zip(grads, *a, g, vb, |gi, y| gi * y);
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    self.acc_zip(grads, *b, g, va, |gi, x| gi * x);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc_zip(grads, *a, g, vb, |gi, y| gi / y);
                }
                if self.needs(*b) {
                    let slot = ensure(grads, b.0, vb.shape());
                    for i in 0..g.len() {
                        let x = va.data()[i];
                        let y = vb.data()[i];
                        slot.data_mut()[i] -= g.data()[i] * x / (y * y);
                    }
                }
            }
            Op::AddScalar(a) => self.acc_mapped(grads, *a, g, |gi, _| gi),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_mapped(grads, *a, g, move |gi, _| gi * c)
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.acc_zip(grads, *a, g, y, |gi, yi| gi * (1.0 - yi * yi));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc_zip(grads, *a, g, y, |gi, yi| gi * yi * (1.0 - yi));
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.acc_zip(grads, *a, g, y, |gi, yi| gi * yi);
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                self.acc_zip(grads, *a, g, x, |gi, xi| gi / xi);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                self.acc_zip(grads, *a, g, y, |gi, yi| gi / (2.0 * yi));
            }
            Op::Log1pExp(a) => {
                let x = self.value(*a);
                self.acc_zip(grads, *a, g, x, |gi, xi| gi / (1.0 + (-xi).exp()));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc_zip(grads, *a, g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
            }
            Op::RowSoftmax(a) => {
                if !self.needs(*a) {
                    return;
                }
                let y = &node.value;
                let (rows, cols) = y.shape();
                let slot = ensure(grads, a.0, (rows, cols));
                for r in 0..rows {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    let srow = &mut slot.data_mut()[r * cols..(r + 1) * cols];
                    for ((s, &yi), &gi) in srow.iter_mut().zip(yrow).zip(grow) {
                        *s += yi * (gi - dot);
                    }
                }
            }
            Op::Transpose(a) => {
                if !self.needs(*a) {
                    return;
                }
                let gt = g.transpose();
                let slot = ensure(grads, a.0, self.value(*a).shape());
                slot.add_assign(&gt);
            }
            Op::ConcatRows(inputs) => {
                let mut r = 0;
                let cols = node.value.cols();
                for &inp in inputs {
                    let h = self.value(inp).rows();
                    if self.needs(inp) {
                        let slot = ensure(grads, inp.0, (h, cols));
                        let block = &g.data()[r * cols..(r + h) * cols];
                        for (s, &gv) in slot.data_mut().iter_mut().zip(block) {
                            *s += gv;
                        }
                    }
                    r += h;
                }
            }
            Op::Slice { input, r0, c0 } => {
                if !self.needs(*input) {
                    return;
                }
                let shape = self.value(*input).shape();
                let slot = ensure(grads, input.0, shape);
                let (gr, gc) = g.shape();
                for r in 0..gr {
                    for c in 0..gc {
                        let flat = (r0 + r) * shape.1 + (c0 + c);
                        slot.data_mut()[flat] += g.get(r, c);
                    }
                }
            }
            Op::Gather { input, indices } => {
                if !self.needs(*input) {
                    return;
                }
                let shape = self.value(*input).shape();
                let slot = ensure(grads, input.0, shape);
                for (pos, &flat) in indices.iter().enumerate() {
                    slot.data_mut()[flat] += g.data()[pos];
                }
            }
            Op::ReduceSum(a) => {
                let gv = g.as_scalar();
                self.acc_mapped(grads, *a, &self.broadcast(*a, gv), |gi, _| gi);
            }
            Op::ReduceMean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.as_scalar() / n;
                self.acc_mapped(grads, *a, &self.broadcast(*a, gv), |gi, _| gi);
            }
        }
    }

    fn broadcast(&self, like: NodeId, v: f64) -> Array {
        let (r, c) = self.value(like).shape();
        Array::filled(r, c, v)
    }

    /// Accumulate `f(g[i], _)` into the adjoint of `target`.
    fn acc_mapped(
        &self,
        grads: &mut [Option<Array>],
        target: NodeId,
        g: &Array,
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(target) {
            return;
        }
        let slot = ensure(grads, target.0, self.value(target).shape());
        for (s, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
            *s += f(gv, 0.0);
        }
    }

    /// Accumulate `f(g[i], other[i])` into the adjoint of `target`.
    fn acc_zip(
        &self,
        grads: &mut [Option<Array>],
        target: NodeId,
        g: &Array,
        other: &Array,
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(target) {
            return;
        }
        let slot = ensure(grads, target.0, self.value(target).shape());
        for ((s, &gv), &ov) in slot.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
            *s += f(gv, ov);
        }
    }
}

fn ensure(grads: &mut [Option<Array>], idx: usize, shape: (usize, usize)) -> &mut Array {
    grads[idx].get_or_insert_with(|| Array::zeros(shape.0, shape.1))
}
