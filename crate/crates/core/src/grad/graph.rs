use std::cell::Cell;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math::log_sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub enum Op {
    Input(usize),
    Param(usize),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Square(NodeId),
    LogSigmoid(NodeId),
    /// `[m, n] -> [1, n]`
    SumRows(NodeId),
    /// `[m, n] -> [m, 1]`
    SumCols(NodeId),
    /// `[1, n] -> [rows, n]`
    BroadcastRows(NodeId, usize),
    /// `[m, 1] -> [m, cols]`
    BroadcastCols(NodeId, usize),
    /// Row-major reinterpretation.
    Reshape(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Zero-padded embedding of a block at column `start` of a `total`-wide row.
    PadCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`.
    LogSumExpCols(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::LogSumExpCols(_) => "logsumexp_cols",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input(_) | Param(_) | Const(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            ConcatCols(v) => v.clone(),
            Transpose(a) | Neg(a) | Scale(a, _) | Offset(a, _) | Tanh(a) | Sin(a) | Cos(a)
            | Exp(a) | Square(a) | LogSigmoid(a) | SumRows(a) | SumCols(a)
            | BroadcastRows(a, _) | BroadcastCols(a, _) | Reshape(a, ..) | SliceCols(a, ..)
            | PadCols(a, ..) | LogSumExpCols(a) => vec![*a],
        }
    }
}

/// Ops whose derivative rule can be deliberately corrupted to exercise the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhDerivative,
}

thread_local! {
    static FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Install (or clear) a derivative fault for graphs built on this thread.
pub fn set_fault(fault: Option<Fault>) {
    FAULT.with(|f| f.set(fault));
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// Leaf values for one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Bindings<'a> {
    pub inputs: &'a [Tensor],
    pub params: &'a [Tensor],
}

/// An append-only computation graph. Derivatives are themselves appended as
/// nodes, so gradients of gradients need no special machinery.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    n_inputs: usize,
    fault: Option<Fault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_inputs: 0,
            fault: FAULT.with(|f| f.get()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: operand shapes {sa:?} and {sb:?} differ");
        sa
    }

    /// A new input leaf; slots are numbered in creation order.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push(Op::Input(slot), (rows, cols))
    }

    pub fn param(&mut self, slot: usize, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Param(slot), (rows, cols))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let s = t.shape();
        self.push(Op::Const(t), s)
    }

    pub fn filled(&mut self, rows: usize, cols: usize, v: f64) -> NodeId {
        self.constant(Tensor::filled(rows, cols, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul: inner extents {k} and {k2} differ");
        self.push(Op::MatMul(a, b), (m, n))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        self.push(Op::Transpose(a), (n, m))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "add");
        self.push(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "sub");
        self.push(Op::Sub(a, b), s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "mul");
        self.push(Op::Mul(a, b), s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Neg(a), s)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Scale(a, c), s)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Offset(a, c), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Tanh(a), s)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Sin(a), s)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Cos(a), s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Exp(a), s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Square(a), s)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::LogSigmoid(a), s)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (_, n) = self.shape(a);
        self.push(Op::SumRows(a), (1, n))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        self.push(Op::SumCols(a), (m, 1))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let r = self.sum_rows(a);
        self.sum_cols(r)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, 1, "broadcast_rows needs a single-row operand");
        self.push(Op::BroadcastRows(a, rows), (rows, n))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(n, 1, "broadcast_cols needs a single-column operand");
        self.push(Op::BroadcastCols(a, cols), (m, cols))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m * n, rows * cols, "reshape must preserve the element count");
        self.push(Op::Reshape(a, rows, cols), (rows, cols))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        self.push(Op::SliceCols(a, start, len), (m, len))
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + n <= total, "pad_cols out of range");
        self.push(Op::PadCols(a, start, total), (m, total))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|p| self.shape(*p).0 == m),
            "concat_cols: row counts differ"
        );
        let n = parts.iter().map(|p| self.shape(*p).1).sum();
        self.push(Op::ConcatCols(parts.to_vec()), (m, n))
    }

    pub fn logsumexp_cols(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        self.push(Op::LogSumExpCols(a), (m, 1))
    }

    /// Nodes that `outputs` depend on.
    fn reachable(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for o in outputs {
            need[o.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if need[i] {
                for a in self.nodes[i].op.operands() {
                    need[a.0] = true;
                }
            }
        }
        need
    }

    fn check_leaf(&self, id: usize, t: &Tensor, kind: &str) -> Result<()> {
        if t.shape() != self.nodes[id].shape {
            return Err(Error::Shape(format!(
                "{kind} bound with shape {:?}, graph expects {:?}",
                t.shape(),
                self.nodes[id].shape
            )));
        }
        Ok(())
    }

    fn leaf<'a>(&self, i: usize, b: &Bindings<'a>) -> Result<&'a Tensor> {
        match &self.nodes[i].op {
            Op::Input(s) => {
                let t = b
                    .inputs
                    .get(*s)
                    .ok_or_else(|| Error::Shape(format!("input slot {s} unbound")))?;
                self.check_leaf(i, t, "input")?;
                Ok(t)
            }
            Op::Param(s) => {
                let t = b
                    .params
                    .get(*s)
                    .ok_or_else(|| Error::Shape(format!("parameter slot {s} unbound")))?;
                self.check_leaf(i, t, "parameter")?;
                Ok(t)
            }
            _ => unreachable!(),
        }
    }

    /// Evaluate `outputs`. Every computed node is checked for finiteness.
    pub fn eval(&self, b: Bindings, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let need = self.reachable(outputs);
        let mut vals: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if !need[i] {
                continue;
            }
            let v = match &self.nodes[i].op {
                Op::Input(_) | Op::Param(_) => self.leaf(i, &b)?.clone(),
                op => forward_op(op, |n: NodeId| vals[n.0].as_ref().expect("topological order")),
            };
            if !v.is_finite() {
                return Err(Error::non_finite(self.nodes[i].op.name()));
            }
            vals[i] = Some(v);
        }
        Ok(outputs
            .iter()
            .map(|o| vals[o.0].clone().expect("evaluated"))
            .collect())
    }

    /// Forward-mode directional derivative. `tangents` supplies a direction
    /// for every bound leaf (same shapes as `b`).
    pub fn jvp(&self, b: Bindings, tangents: Bindings, outputs: &[NodeId]) -> Result<Vec<(Tensor, Tensor)>> {
        let need = self.reachable(outputs);
        let n = self.nodes.len();
        let mut vals: Vec<Option<Tensor>> = vec![None; n];
        let mut tans: Vec<Option<Tensor>> = vec![None; n];
        for i in 0..n {
            if !need[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            let (v, dv) = match op {
                Op::Input(_) | Op::Param(_) => {
                    let v = self.leaf(i, &b)?.clone();
                    let dv = self.leaf(i, &tangents)?.clone();
                    (v, dv)
                }
                _ => {
                    let v = forward_op(op, |k: NodeId| vals[k.0].as_ref().unwrap());
                    let dv = tangent_op(op, &v, |k| vals[k.0].as_ref().unwrap(), |k| tans[k.0].as_ref().unwrap());
                    (v, dv)
                }
            };
            if !v.is_finite() || !dv.is_finite() {
                return Err(Error::non_finite(op.name()));
            }
            vals[i] = Some(v);
            tans[i] = Some(dv);
        }
        Ok(outputs
            .iter()
            .map(|o| (vals[o.0].clone().unwrap(), tans[o.0].clone().unwrap()))
            .collect())
    }

    /// Symbolic vector-Jacobian product: appends nodes computing
    /// `seed^T d(output)/d(w)` for each `w` in `wrt` and returns them.
    pub fn vjp(&mut self, output: NodeId, seed: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(self.shape(output), self.shape(seed), "vjp: seed shape must match output");
        let top = output.0;
        // Only propagate through nodes on a path from `wrt` to `output`.
        let mut from_wrt = vec![false; top + 1];
        for w in wrt {
            if w.0 <= top {
                from_wrt[w.0] = true;
            }
        }
        for i in 0..=top {
            if !from_wrt[i] && self.nodes[i].op.operands().iter().any(|a| from_wrt[a.0]) {
                from_wrt[i] = true;
            }
        }
        let to_out = self.reachable(&[output]);
        let mut adj: Vec<Option<NodeId>> = vec![None; top + 1];
        adj[top] = Some(seed);
        for i in (0..=top).rev() {
            let Some(g) = adj[i] else { continue };
            if !from_wrt[i] || !to_out[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (a, ga) in self.pullback(&op, NodeId(i), g) {
                if !from_wrt[a.0] {
                    continue;
                }
                adj[a.0] = Some(match adj[a.0] {
                    None => ga,
                    Some(prev) => self.add(prev, ga),
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.filled(r, c, 0.0)
                }
            })
            .collect()
    }

    /// Gradient of a scalar node with respect to `wrt`.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!(
                "gradient needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let one = self.filled(1, 1, 1.0);
        Ok(self.vjp(output, one, wrt))
    }

    /// Reverse rules: adjoint contributions to each operand of node `y`.
    fn pullback(&mut self, op: &Op, y: NodeId, g: NodeId) -> Vec<(NodeId, NodeId)> {
        use Op::*;
        match *op {
            Input(_) | Param(_) | Const(_) => vec![],
            MatMul(a, b) => {
                let bt = self.transpose(b);
                let at = self.transpose(a);
                let ga = self.matmul(g, bt);
                let gb = self.matmul(at, g);
                vec![(a, ga), (b, gb)]
            }
            Transpose(a) => vec![(a, self.transpose(g))],
            Add(a, b) => vec![(a, g), (b, g)],
            Sub(a, b) => vec![(a, g), (b, self.neg(g))],
            Mul(a, b) => {
                let ga = self.mul(g, b);
                let gb = self.mul(g, a);
                vec![(a, ga), (b, gb)]
            }
            Neg(a) => vec![(a, self.neg(g))],
            Scale(a, c) => vec![(a, self.scale(g, c))],
            Offset(a, _) => vec![(a, g)],
            Tanh(a) => {
                let y2 = self.square(y);
                let ny2 = self.neg(y2);
                let mut d = self.offset(ny2, 1.0);
                if self.fault == Some(Fault::TanhDerivative) {
                    d = self.scale(d, 1.01);
                }
                vec![(a, self.mul(g, d))]
            }
            Sin(a) => {
                let c = self.cos(a);
                vec![(a, self.mul(g, c))]
            }
            Cos(a) => {
                let s = self.sin(a);
                let gs = self.mul(g, s);
                vec![(a, self.neg(gs))]
            }
            Exp(a) => vec![(a, self.mul(g, y))],
            Square(a) => {
                let ga = self.mul(g, a);
                vec![(a, self.scale(ga, 2.0))]
            }
            LogSigmoid(a) => {
                // d/da log sigmoid(a) = sigmoid(-a) = exp(log sigmoid(-a))
                let na = self.neg(a);
                let l = self.log_sigmoid(na);
                let s = self.exp(l);
                vec![(a, self.mul(g, s))]
            }
            SumRows(a) => {
                let m = self.shape(a).0;
                vec![(a, self.broadcast_rows(g, m))]
            }
            SumCols(a) => {
                let n = self.shape(a).1;
                vec![(a, self.broadcast_cols(g, n))]
            }
            BroadcastRows(a, _) => vec![(a, self.sum_rows(g))],
            BroadcastCols(a, _) => vec![(a, self.sum_cols(g))],
            Reshape(a, ..) => {
                let (m, n) = self.shape(a);
                vec![(a, self.reshape(g, m, n))]
            }
            SliceCols(a, start, _) => {
                let total = self.shape(a).1;
                vec![(a, self.pad_cols(g, start, total))]
            }
            PadCols(a, start, _) => {
                let len = self.shape(a).1;
                vec![(a, self.slice_cols(g, start, len))]
            }
            ConcatCols(ref parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.shape(p).1;
                    out.push((p, self.slice_cols(g, off, w)));
                    off += w;
                }
                out
            }
            LogSumExpCols(a) => {
                let n = self.shape(a).1;
                let yb = self.broadcast_cols(y, n);
                let gb = self.broadcast_cols(g, n);
                let z = self.sub(a, yb);
                let p = self.exp(z);
                vec![(a, self.mul(gb, p))]
            }
        }
    }
}

fn forward_op<'a>(op: &Op, v: impl Fn(NodeId) -> &'a Tensor) -> Tensor {
    use Op::*;
    match *op {
        Input(_) | Param(_) => unreachable!("leaves are bound, not computed"),
        Const(ref t) => t.clone(),
        MatMul(a, b) => v(a).matmul(v(b)),
        Transpose(a) => v(a).transpose(),
        Add(a, b) => v(a).zip(v(b), |x, y| x + y),
        Sub(a, b) => v(a).zip(v(b), |x, y| x - y),
        Mul(a, b) => v(a).zip(v(b), |x, y| x * y),
        Neg(a) => v(a).map(|x| -x),
        Scale(a, c) => v(a).map(|x| c * x),
        Offset(a, c) => v(a).map(|x| x + c),
        Tanh(a) => v(a).map(f64::tanh),
        Sin(a) => v(a).map(f64::sin),
        Cos(a) => v(a).map(f64::cos),
        Exp(a) => v(a).map(f64::exp),
        Square(a) => v(a).map(|x| x * x),
        LogSigmoid(a) => v(a).map(log_sigmoid),
        SumRows(a) => v(a).sum_rows(),
        SumCols(a) => v(a).sum_cols(),
        BroadcastRows(a, r) => v(a).broadcast_rows(r),
        BroadcastCols(a, c) => v(a).broadcast_cols(c),
        Reshape(a, r, c) => Tensor::new(r, c, v(a).data.clone()),
        SliceCols(a, s, l) => v(a).slice_cols(s, l),
        PadCols(a, s, t) => v(a).pad_cols(s, t),
        ConcatCols(ref parts) => {
            let ts: Vec<&Tensor> = parts.iter().map(|p| v(*p)).collect();
            Tensor::concat_cols(&ts)
        }
        LogSumExpCols(a) => v(a).logsumexp_cols(),
    }
}

/// Forward tangent rules, written independently of the reverse rules.
fn tangent_op<'a>(
    op: &Op,
    y: &Tensor,
    v: impl Fn(NodeId) -> &'a Tensor,
    dv: impl Fn(NodeId) -> &'a Tensor,
) -> Tensor {
    use Op::*;
    match *op {
        Input(_) | Param(_) => unreachable!(),
        Const(ref t) => Tensor::zeros(t.rows, t.cols),
        MatMul(a, b) => {
            let l = dv(a).matmul(v(b));
            let r = v(a).matmul(dv(b));
            l.zip(&r, |x, y| x + y)
        }
        Transpose(a) => dv(a).transpose(),
        Add(a, b) => dv(a).zip(dv(b), |x, y| x + y),
        Sub(a, b) => dv(a).zip(dv(b), |x, y| x - y),
        Mul(a, b) => {
            let l = dv(a).zip(v(b), |x, y| x * y);
            let r = v(a).zip(dv(b), |x, y| x * y);
            l.zip(&r, |x, y| x + y)
        }
        Neg(a) => dv(a).map(|x| -x),
        Scale(a, c) => dv(a).map(|x| c * x),
        Offset(a, _) => dv(a).clone(),
        Tanh(a) => dv(a).zip(y, |d, t| d * (1.0 - t * t)),
        Sin(a) => dv(a).zip(v(a), |d, x| d * x.cos()),
        Cos(a) => dv(a).zip(v(a), |d, x| -d * x.sin()),
        Exp(a) => dv(a).zip(y, |d, e| d * e),
        Square(a) => dv(a).zip(v(a), |d, x| 2.0 * x * d),
        LogSigmoid(a) => dv(a).zip(v(a), |d, x| d / (1.0 + x.exp())),
        SumRows(a) => dv(a).sum_rows(),
        SumCols(a) => dv(a).sum_cols(),
        BroadcastRows(a, r) => dv(a).broadcast_rows(r),
        BroadcastCols(a, c) => dv(a).broadcast_cols(c),
        Reshape(a, r, c) => Tensor::new(r, c, dv(a).data.clone()),
        SliceCols(a, s, l) => dv(a).slice_cols(s, l),
        PadCols(a, s, t) => dv(a).pad_cols(s, t),
        ConcatCols(ref parts) => {
            let ts: Vec<&Tensor> = parts.iter().map(|p| dv(*p)).collect();
            Tensor::concat_cols(&ts)
        }
        LogSumExpCols(a) => {
            let (x, d) = (v(a), dv(a));
            let mut out = Tensor::zeros(x.rows, 1);
            for r in 0..x.rows {
                let mut acc = 0.0;
                for c in 0..x.cols {
                    acc += (x.at(r, c) - y.data[r]).exp() * d.at(r, c);
                }
                out.data[r] = acc;
            }
            out
        }
    }
}
