use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node in a [`CompGraph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op {
    /// Trainable input.
    Param,
    /// Data or detached value. Never carries gradient.
    Const,
    /// Output of a first-order `grad` call; blocks second-order paths.
    DetachedGrad,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// `a * s` where `s` is a `1 x 1` node.
    MulScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    BroadcastRows(NodeId, usize),
    SumRows(NodeId),
    BroadcastCols(NodeId, usize),
    SumCols(NodeId),
    Sum(NodeId),
    BroadcastScalar(NodeId, usize, usize),
    Tanh(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    /// Contiguous window `[start, start + rows*cols)` of the parent's buffer, reshaped.
    Slice { src: NodeId, start: usize, rows: usize, cols: usize },
    /// Inverse of `Slice`: places the parent at `start` inside a zero buffer of the given shape.
    Pad { src: NodeId, start: usize, rows: usize, cols: usize },
}

impl Op {
    fn parents(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Param | Const | DetachedGrad => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddConst(a, _)
            | Transpose(a)
            | BroadcastRows(a, _)
            | SumRows(a)
            | BroadcastCols(a, _)
            | SumCols(a)
            | Sum(a)
            | BroadcastScalar(a, _, _)
            | Tanh(a)
            | Relu(a)
            | Abs(a)
            | Exp(a)
            | Log(a)
            | Recip(a) => [Some(a), None],
            Slice { src, .. } | Pad { src, .. } => [Some(src), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run computation graph with eager values.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. Gradients are themselves built as graph nodes when
/// requested with [`CompGraph::grad_graph`], which is what makes
/// differentiating through an inner gradient step possible.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

impl CompGraph {
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
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.val(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_const(&mut self, a: NodeId, offset: f64) -> NodeId {
        let v = self.val(a).map(|x| x + offset);
        self.push(Op::AddConst(a, offset), v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let factor = self.val(s).item();
        let v = self.val(a).map(|x| x * factor);
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).matmul(self.val(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let v = self.val(a).broadcast_rows(rows);
        self.push(Op::BroadcastRows(a, rows), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).sum_rows();
        self.push(Op::SumRows(a), v)
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let v = self.val(a).broadcast_cols(cols);
        self.push(Op::BroadcastCols(a, cols), v)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).sum_cols();
        self.push(Op::SumCols(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.val(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.val(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = Tensor::filled(rows, cols, self.val(a).item());
        self.push(Op::BroadcastScalar(a, rows, cols), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Inner product of two same-shaped nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn slice(&mut self, src: NodeId, start: usize, rows: usize, cols: usize) -> NodeId {
        let data = &self.val(src).data()[start..start + rows * cols];
        let v = Tensor::new(rows, cols, data.to_vec());
        self.push(Op::Slice { src, start, rows, cols }, v)
    }

    fn pad(&mut self, src: NodeId, start: usize, rows: usize, cols: usize) -> NodeId {
        let mut data = vec![0.0; rows * cols];
        let s = self.val(src).data();
        data[start..start + s.len()].copy_from_slice(s);
        self.push(Op::Pad { src, start, rows, cols }, Tensor::new(rows, cols, data))
    }

    /// Gradients of scalar `output` w.r.t. `wrt`, returned as plain tensors.
    ///
    /// The graph is left exactly as it was. Gradients are *not* differentiable;
    /// use [`CompGraph::grad_graph`] when a later loss must see through them.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.nodes.len();
        let ids = self.backward(output, wrt)?;
        let grads = ids.iter().map(|&id| self.nodes[id.0].value.clone()).collect();
        self.nodes.truncate(mark);
        Ok(grads)
    }

    /// Like [`CompGraph::grad`] but the results are inserted as detached nodes.
    pub fn grad_detached(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        let grads = self.grad(output, wrt)?;
        Ok(grads.into_iter().map(|g| self.push(Op::DetachedGrad, g)).collect())
    }

    /// Gradients of scalar `output` w.r.t. `wrt`, built as differentiable graph nodes.
    pub fn grad_graph(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        self.backward(output, wrt)
    }

    /// Gradient of a loss that embeds gradient steps. Fails if any of those
    /// steps was built from a detached (first-order) gradient, since the
    /// result would silently drop the second-order terms.
    pub fn grad_through_update(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        self.check_output(output)?;
        if let Some(pos) = self.nodes[..=output.0].iter().position(|n| matches!(n.op, Op::DetachedGrad)) {
            return Err(AutodiffError::DetachedGradient { node: pos });
        }
        self.grad(output, wrt)
    }

    fn check_output(&self, output: NodeId) -> Result<(), AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::NoForward);
        }
        let shape = self.nodes[output.0].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { rows: shape.0, cols: shape.1 });
        }
        Ok(())
    }

    fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        self.check_output(output)?;
        if let Some(bad) = wrt.iter().find(|w| w.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode { node: bad.0 });
        }
        let end = output.0 + 1;

        // Nodes on some path from a `wrt` node to the output.
        let mut reaches = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reaches[w.0] = true;
            }
        }
        for i in 0..end {
            if !reaches[i] {
                reaches[i] = self.nodes[i].op.parents().iter().flatten().any(|p| reaches[p.0]);
            }
        }

        // Adjoints are fresh on every call.
        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if reaches[output.0] {
            adjoint[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op;
            for (parent, contrib) in self.vjp(NodeId(i), op, g, &reaches) {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of `node` for each parent on a gradient path.
    fn vjp(&mut self, node: NodeId, op: Op, g: NodeId, reaches: &[bool]) -> Vec<(NodeId, NodeId)> {
        use Op::*;
        let live = |p: NodeId| reaches[p.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Param | Const | DetachedGrad => {}
            Add(a, b) => {
                if live(a) {
                    out.push((a, g));
                }
                if live(b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if live(a) {
                    out.push((a, g));
                }
                if live(b) {
                    let n = self.neg(g);
                    out.push((b, n));
                }
            }
            Neg(a) => {
                let n = self.neg(g);
                out.push((a, n));
            }
            Mul(a, b) => {
                if live(a) {
                    let d = self.mul(g, b);
                    out.push((a, d));
                }
                if live(b) {
                    let d = self.mul(g, a);
                    out.push((b, d));
                }
            }
            Scale(a, f) => {
                let d = self.scale(g, f);
                out.push((a, d));
            }
            AddConst(a, _) => out.push((a, g)),
            MulScalar(a, s) => {
                if live(a) {
                    let d = self.mul_scalar(g, s);
                    out.push((a, d));
                }
                if live(s) {
                    let d = self.dot(g, a);
                    out.push((s, d));
                }
            }
            MatMul(a, b) => {
                if live(a) {
                    let bt = self.transpose(b);
                    let d = self.matmul(g, bt);
                    out.push((a, d));
                }
                if live(b) {
                    let at = self.transpose(a);
                    let d = self.matmul(at, g);
                    out.push((b, d));
                }
            }
            Transpose(a) => {
                let d = self.transpose(g);
                out.push((a, d));
            }
            BroadcastRows(a, _) => {
                let d = self.sum_rows(g);
                out.push((a, d));
            }
            SumRows(a) => {
                let rows = self.shape(a).0;
                let d = self.broadcast_rows(g, rows);
                out.push((a, d));
            }
            BroadcastCols(a, _) => {
                let d = self.sum_cols(g);
                out.push((a, d));
            }
            SumCols(a) => {
                let cols = self.shape(a).1;
                let d = self.broadcast_cols(g, cols);
                out.push((a, d));
            }
            Sum(a) => {
                let (r, c) = self.shape(a);
                let d = self.broadcast_scalar(g, r, c);
                out.push((a, d));
            }
            BroadcastScalar(a, _, _) => {
                let d = self.sum(g);
                out.push((a, d));
            }
            Tanh(_) => {
                // d tanh = 1 - tanh^2, expressed through the output node
                let a = op.parents()[0].unwrap();
                let sq = self.mul(node, node);
                let nsq = self.neg(sq);
                let deriv = self.add_const(nsq, 1.0);
                let d = self.mul(g, deriv);
                out.push((a, d));
            }
            Relu(a) => {
                let mask = self.val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let d = self.mul(g, m);
                out.push((a, d));
            }
            Abs(a) => {
                let sign = self.val(a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                let s = self.constant(sign);
                let d = self.mul(g, s);
                out.push((a, d));
            }
            Exp(a) => {
                let d = self.mul(g, node);
                out.push((a, d));
            }
            Log(a) => {
                let r = self.recip(a);
                let d = self.mul(g, r);
                out.push((a, d));
            }
            Recip(a) => {
                let sq = self.mul(node, node);
                let p = self.mul(g, sq);
                let d = self.neg(p);
                out.push((a, d));
            }
            Slice { src, start, .. } => {
                let (r, c) = self.shape(src);
                let d = self.pad(g, start, r, c);
                out.push((src, d));
            }
            Pad { src, start, .. } => {
                let (r, c) = self.shape(src);
                let d = self.slice(g, start, r, c);
                out.push((src, d));
            }
        }
        out
    }
}
