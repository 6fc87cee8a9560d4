use std::cell::Cell;

use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction / normalization axis for rank-2 tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along rows: collapses the row dimension.
    Rows,
    /// Along columns: collapses the column dimension.
    Cols,
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    ScaleBy,
    Neg,
    Square,
    Tanh,
    Relu,
    Exp,
    Log,
    Softplus,
    Softmax,
    Concat,
    Slice,
    Sum,
    Mean,
    SumAll,
    Transpose,
    Clamp,
    Scan,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        let all = [
            Leaf, MatMul, Add, AddRow, Sub, Mul, Scale, ScaleBy, Neg, Square, Tanh, Relu, Exp,
            Log, Softplus, Softmax, Concat, Slice, Sum, Mean, SumAll, Transpose, Clamp, Scan,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of `kind` on the current thread. Test-only
/// fault injection for exercising the gradient checker.
pub fn inject_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

fn faulty(kind: OpKind) -> bool {
    FAULT.with(|f| f.get() == Some(kind))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Neg(NodeId),
    Square(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Softmax(NodeId, Axis),
    Concat(Vec<NodeId>, Axis),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
    },
    Sum(NodeId, Axis),
    Mean(NodeId, Axis),
    SumAll(NodeId),
    Transpose(NodeId),
    Clamp(NodeId, f64, f64),
    Scan {
        input: NodeId,
        transition: NodeId,
        reverse: bool,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Neg(..) => OpKind::Neg,
            Op::Square(..) => OpKind::Square,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Scan { .. } => OpKind::Scan,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Upper bound applied to `exp` inputs so outputs stay finite.
pub const EXP_INPUT_MAX: f64 = 700.0;

/// Eagerly evaluated computation graph. Nodes are appended in evaluation
/// order, so the node list is already a topological order and
/// [`Graph::backward`] replays it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let s = &self.shapes[id.0];
                Tensor::new(s.clone(), vec![0.0; s.iter().product()]).expect("shape matches")
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let s = &self.shapes[id.0];
                Tensor::new(s.clone(), vec![0.0; s.iter().product()]).expect("shape matches")
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        dims(&self.nodes[id.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(v, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        self.same_shape(name, a, b)?;
        let v = self.value(a).zip_map(self.value(b), f);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Adds a `1 x D` row to every row of an `N x D` tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(sa.1) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(DiffError::ShapeMismatch {
                op: "scale_by",
                left: self.shape(a),
                right: ss,
            });
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        let rg = self.needs(&[a, s]);
        Ok(self.push(v, Op::ScaleBy(a, s), rg))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), |x| x.min(EXP_INPUT_MAX).exp())
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Clamps values into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let x = self.value(a);
        let v = match axis {
            Axis::Cols => softmax_rows(x),
            Axis::Rows => softmax_rows(&x.transpose()).transpose(),
        };
        let rg = self.needs(&[a]);
        self.push(v, Op::Softmax(a, axis), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, DiffError> {
        let first = *parts.first().ok_or(DiffError::EmptyConcat)?;
        let (r0, c0) = self.shape(first);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: (r0, c0),
                    right: (r, c),
                });
            }
        }
        let v = match axis {
            Axis::Rows => {
                let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        let rg = self.needs(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous block of `len` rows (or columns) starting at `start`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    ) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(a);
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > extent || len == 0 {
            return Err(DiffError::SliceOutOfRange {
                shape: (r, c),
                start,
                len,
            });
        }
        let x = self.value(a);
        let v = match axis {
            Axis::Rows => Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => Tensor::from_fn(r, len, |i, j| x.at(i, start + j)),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let v = reduce(self.value(a), axis, 1.0);
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a, axis), rg)
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let (r, c) = self.shape(a);
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        let v = reduce(self.value(a), axis, 1.0 / n as f64);
        let rg = self.needs(&[a]);
        self.push(v, Op::Mean(a, axis), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Linear recurrence over rows: `h_t = A h_{t-1} + u_t` with `h_0 = 0`
    /// (or `h_t = A h_{t+1} + u_t` from the last row when `reverse`).
    /// `input` is `N x D`, `transition` is `D x D`; the output holds every
    /// `h_t` in original row order.
    pub fn scan(
        &mut self,
        input: NodeId,
        transition: NodeId,
        reverse: bool,
    ) -> Result<NodeId, DiffError> {
        let (n, d) = self.shape(input);
        let sa = self.shape(transition);
        if sa != (d, d) {
            return Err(DiffError::ShapeMismatch {
                op: "scan",
                left: (n, d),
                right: sa,
            });
        }
        let u = self.value(input);
        let a = self.value(transition);
        let mut h = vec![0.0; n * d];
        let mut prev: Option<usize> = None;
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            for i in 0..d {
                let mut acc = u.data()[t * d + i];
                if let Some(p) = prev {
                    let arow = &a.data()[i * d..(i + 1) * d];
                    let hp = &h[p * d..(p + 1) * d];
                    acc += arow.iter().zip(hp).map(|(x, y)| x * y).sum::<f64>();
                }
                h[t * d + i] = acc;
            }
            prev = Some(t);
        }
        let v = Tensor::matrix(n, d, h)?;
        let rg = self.needs(&[input, transition]);
        Ok(self.push(
            v,
            Op::Scan {
                input,
                transition,
                reverse,
            },
            rg,
        ))
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let corrupt = faulty(node.op.kind());
        let mut acc = |id: NodeId, mut contrib: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            if corrupt {
                contrib.scale_in_place(1.1);
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul_t(vb));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, va.t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, reduce(g, Axis::Rows, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                acc(*a, g.map(|v| v * k));
                let ds: f64 = g.data().iter().zip(self.value(*a).data()).map(|(p, q)| p * q).sum();
                acc(*s, Tensor::scalar(ds));
            }
            Op::Neg(a) => acc(*a, g.map(|v| -v)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Relu(a) => acc(*a, g.zip_map(y, |gv, t| if t > 0.0 { gv } else { 0.0 })),
            Op::Exp(a) => acc(*a, g.zip_map(y, |gv, e| gv * e)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv }),
            ),
            Op::Softmax(a, axis) => {
                let grad = match axis {
                    Axis::Cols => softmax_backward_rows(y, g),
                    Axis::Rows => softmax_backward_rows(&y.transpose(), &g.transpose()).transpose(),
                };
                acc(*a, grad);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let piece = match axis {
                        Axis::Rows => {
                            let cols = g.cols();
                            let t = Tensor::matrix(
                                r,
                                c,
                                g.data()[offset * cols..(offset + r) * cols].to_vec(),
                            )
                            .expect("slice of gradient");
                            offset += r;
                            t
                        }
                        Axis::Cols => {
                            let t = Tensor::from_fn(r, c, |i, j| g.at(i, offset + j));
                            offset += c;
                            t
                        }
                    };
                    acc(p, piece);
                }
            }
            Op::Slice { input, axis, start } => {
                let (r, c) = self.shape(*input);
                let mut full = Tensor::zeros(r, c);
                match axis {
                    Axis::Rows => {
                        full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    }
                    Axis::Cols => {
                        let w = g.cols();
                        for i in 0..r {
                            for j in 0..w {
                                full.data_mut()[i * c + start + j] = g.at(i, j);
                            }
                        }
                    }
                }
                acc(*input, full);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (r, c) = self.shape(*a);
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), Axis::Rows) => 1.0 / r as f64,
                    (Op::Mean(..), Axis::Cols) => 1.0 / c as f64,
                    _ => 1.0,
                };
                let t = match axis {
                    Axis::Rows => Tensor::from_fn(r, c, |_, j| g.at(0, j) * scale),
                    Axis::Cols => Tensor::from_fn(r, c, |i, _| g.at(i, 0) * scale),
                };
                acc(*a, t);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let gv = g.item();
                acc(
                    *a,
                    Tensor::new(x.shape().to_vec(), vec![gv; x.len()]).expect("same shape"),
                );
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Scan {
                input,
                transition,
                reverse,
            } => {
                let (n, d) = self.shape(*input);
                let a = self.value(*transition);
                let h = y;
                // lambda_t = g_t + A^T lambda_{next}
                let mut lam = vec![0.0; n * d];
                let mut da = vec![0.0; d * d];
                let mut next: Option<usize> = None;
                for step in 0..n {
                    let t = if *reverse { step } else { n - 1 - step };
                    for j in 0..d {
                        let mut v = g.data()[t * d + j];
                        if let Some(nx) = next {
                            for i in 0..d {
                                v += a.data()[i * d + j] * lam[nx * d + i];
                            }
                        }
                        lam[t * d + j] = v;
                    }
                    next = Some(t);
                }
                for t in 0..n {
                    let prev = if *reverse {
                        (t + 1 < n).then_some(t + 1)
                    } else {
                        t.checked_sub(1)
                    };
                    if let Some(p) = prev {
                        for i in 0..d {
                            let l = lam[t * d + i];
                            for j in 0..d {
                                da[i * d + j] += l * h.data()[p * d + j];
                            }
                        }
                    }
                }
                acc(*input, Tensor::matrix(n, d, lam).expect("scan grad"));
                acc(*transition, Tensor::matrix(d, d, da).expect("scan grad"));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = y.clone();
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let yr = y.row(r);
        let gr = g.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            row[j] = yr[j] * (gr[j] - dot);
        }
    }
    out
}

fn reduce(x: &Tensor, axis: Axis, scale: f64) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    match axis {
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Tensor::from_fn(1, c, |_, j| out[j] * scale)
        }
        Axis::Cols => Tensor::from_fn(r, 1, |i, _| x.row(i).iter().sum::<f64>() * scale),
    }
}
