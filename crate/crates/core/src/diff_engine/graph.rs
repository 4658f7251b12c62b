//! Append-only computation graph with graph-transform reverse-mode
//! differentiation.
//!
//! Every node holds a dense `rows x cols` block of scalars. Rows index
//! independent samples of a batch, so a single node stands for `rows * cols`
//! scalar nodes that share one operation. Differentiating a graph appends
//! new nodes computing the adjoints, which means the result of [`Graph::grad`]
//! can itself be differentiated again. Training a Lagrangian network relies
//! on this three levels deep.
//!
//! Elementwise binary operations broadcast a dimension of size one against
//! any other size, in the same way `ndarray` co-broadcasting does.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{MechError, Result};

/// Largest 1-norm condition number accepted by [`Graph::batch_solve`].
pub const MAX_CONDITION: f64 = 1e12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Smooth (or piecewise constant) scalar functions applied elementwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Sqrt,
    Recip,
    Exp,
    Ln,
    /// Heaviside step, 1 for `x >= 0`. Its derivative is taken as zero.
    Step,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => x.recip(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Step => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
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
    // ln(1 + e^x) without overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Column count of a slice or padding, either fixed or taken from another
/// node at evaluation time.
#[derive(Clone, Copy, Debug)]
pub enum Width {
    Fixed(usize),
    Like(NodeId),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const(Arc<Array2<f64>>),
    OnesLike(NodeId),
    ZerosLike(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Unary(Unary, NodeId),
    SumAll(NodeId),
    SumLike(NodeId, NodeId),
    BroadcastLike(NodeId, NodeId),
    SliceCols { a: NodeId, start: usize, len: Width },
    PadCols { a: NodeId, start: usize, total: Width },
    BatchMatVec { m: NodeId, v: NodeId, transpose: bool },
    BatchOuter(NodeId, NodeId),
    BatchSolve { m: NodeId, r: NodeId, transpose: bool },
    Select { cond: NodeId, a: NodeId, b: NodeId },
}

impl Op {
    /// Every operand whose value is read during evaluation.
    fn operands(&self) -> Vec<NodeId> {
        let mut out = self.diff_operands();
        match *self {
            Op::OnesLike(a) | Op::ZerosLike(a) => out.push(a),
            Op::SumLike(_, like) | Op::BroadcastLike(_, like) => out.push(like),
            Op::SliceCols { len: w, .. } | Op::PadCols { total: w, .. } => {
                if let Width::Like(n) = w {
                    out.push(n);
                }
            }
            Op::Select { cond, .. } => out.push(cond),
            Op::Unary(Unary::Step, a) => out.push(a),
            _ => {}
        }
        out
    }

    /// Operands through which a derivative flows.
    fn diff_operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Const(_) | Op::OnesLike(_) | Op::ZerosLike(_) => vec![],
            Op::Unary(Unary::Step, _) => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::BatchOuter(a, b)
            | Op::BatchMatVec { m: a, v: b, .. }
            | Op::BatchSolve { m: a, r: b, .. }
            | Op::Select { a, b, .. } => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::SumAll(a)
            | Op::SumLike(a, _)
            | Op::BroadcastLike(a, _)
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. } => vec![a],
        }
    }
}

/// Values bound to the leaves of a graph for one evaluation.
#[derive(Default, Clone)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, &'a Array2<f64>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Array2<f64>) -> &mut Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn with(mut self, leaf: NodeId, value: &'a Array2<f64>) -> Self {
        self.values.insert(leaf, value);
        self
    }
}

/// Append-only computation graph. Operands always precede the nodes that
/// use them, so the node order is a topological order.
#[derive(Default, Clone)]
pub struct Graph {
    ops: Vec<Op>,
    one: Option<NodeId>,
    zero: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(u32::try_from(self.ops.len()).expect("graph exceeds u32 nodes"));
        self.ops.push(op);
        id
    }

    /// A leaf whose value is supplied through [`Bindings`] at evaluation.
    pub fn leaf(&mut self) -> NodeId {
        self.push(Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Const(Arc::new(value)))
    }

    /// A 1x1 constant, broadcast by elementwise operations.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        if value == 1.0 {
            return self.one();
        }
        if value == 0.0 && value.is_sign_positive() {
            return self.zero();
        }
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn one(&mut self) -> NodeId {
        match self.one {
            Some(id) => id,
            None => {
                let id = self.constant(Array2::from_elem((1, 1), 1.0));
                self.one = Some(id);
                id
            }
        }
    }

    fn zero(&mut self) -> NodeId {
        match self.zero {
            Some(id) => id,
            None => {
                let id = self.constant(Array2::zeros((1, 1)));
                self.zero = Some(id);
                id
            }
        }
    }

    pub fn ones_like(&mut self, a: NodeId) -> NodeId {
        self.push(Op::OnesLike(a))
    }

    pub fn zeros_like(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ZerosLike(a))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn unary(&mut self, f: Unary, a: NodeId) -> NodeId {
        self.push(Op::Unary(f, a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Softplus, a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Cos, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Recip, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Ln, a)
    }

    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Step, a)
    }

    /// Sum of every entry, as a 1x1 block.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    /// Sums `a` over the axes along which `like` has size one.
    pub fn sum_like(&mut self, a: NodeId, like: NodeId) -> NodeId {
        self.push(Op::SumLike(a, like))
    }

    /// Broadcasts `a` to the shape of `like`.
    pub fn broadcast_like(&mut self, a: NodeId, like: NodeId) -> NodeId {
        self.push(Op::BroadcastLike(a, like))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols {
            a,
            start,
            len: Width::Fixed(len),
        })
    }

    /// Embeds `a` into a zero block of `total` columns starting at `start`.
    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        self.push(Op::PadCols {
            a,
            start,
            total: Width::Fixed(total),
        })
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[(NodeId, usize)]) -> NodeId {
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut start = 0;
        let mut acc = None;
        for &(node, width) in parts {
            let padded = self.pad_cols(node, start, total);
            start += width;
            acc = Some(match acc {
                None => padded,
                Some(prev) => self.add(prev, padded),
            });
        }
        acc.expect("concat of zero parts")
    }

    /// Row-wise `M_b v_b` (or `M_bᵀ v_b`), with each row of `m` holding a
    /// square matrix flattened row-major.
    pub fn batch_matvec(&mut self, m: NodeId, v: NodeId, transpose: bool) -> NodeId {
        self.push(Op::BatchMatVec { m, v, transpose })
    }

    /// Row-wise outer product `a_b b_bᵀ`, flattened row-major.
    pub fn batch_outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BatchOuter(a, b))
    }

    /// Row-wise solution of `M_b x_b = r_b` (or `M_bᵀ x_b = r_b`).
    ///
    /// Evaluation fails when a system is singular or its condition number
    /// exceeds [`MAX_CONDITION`].
    pub fn batch_solve(&mut self, m: NodeId, r: NodeId, transpose: bool) -> NodeId {
        self.push(Op::BatchSolve { m, r, transpose })
    }

    /// Elementwise `cond > 0 ? a : b`.
    pub fn select(&mut self, cond: NodeId, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Select { cond, a, b })
    }

    /// Appends the adjoint computation of `Σ y` and returns the gradient
    /// node for each entry of `wrt`.
    ///
    /// Rows of a batched graph are independent, so the gradient of the sum
    /// is the per-sample gradient. The returned nodes are ordinary graph
    /// nodes and may be differentiated again.
    pub fn grad(&mut self, y: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        let n = y.index() + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.index() < n {
                depends[w.index()] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = self.ops[i].diff_operands().iter().any(|o| depends[o.index()]);
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if depends[y.index()] {
            adj[y.index()] = Some(self.ones_like(y));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !depends[i] {
                continue;
            }
            let node = NodeId(i as u32);
            let op = self.ops[i].clone();
            for (operand, contribution) in self.vjp(node, &op, g) {
                if !depends[operand.index()] {
                    continue;
                }
                adj[operand.index()] = Some(match adj[operand.index()] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution),
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(a) => a,
                None => self.zeros_like(*w),
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, as new graph nodes.
    fn vjp(&mut self, y: NodeId, op: &Op, g: NodeId) -> Vec<(NodeId, NodeId)> {
        match *op {
            Op::Leaf | Op::Const(_) | Op::OnesLike(_) | Op::ZerosLike(_) => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let da = if ta { self.matmul_t(b, g, tb, true) } else { self.matmul_t(g, b, false, !tb) };
                let db = if tb { self.matmul_t(g, a, true, ta) } else { self.matmul_t(a, g, !ta, false) };
                vec![(a, da), (b, db)]
            }
            Op::Add(a, b) => {
                let da = self.sum_like(g, a);
                let db = self.sum_like(g, b);
                vec![(a, da), (b, db)]
            }
            Op::Sub(a, b) => {
                let da = self.sum_like(g, a);
                let ng = self.neg(g);
                let db = self.sum_like(ng, b);
                vec![(a, da), (b, db)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b);
                let da = self.sum_like(ga, a);
                let gb = self.mul(g, a);
                let db = self.sum_like(gb, b);
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b);
                let da = self.sum_like(ga, a);
                let yb = self.div(y, b);
                let gyb = self.mul(g, yb);
                let ngyb = self.neg(gyb);
                let db = self.sum_like(ngyb, b);
                vec![(a, da), (b, db)]
            }
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::Unary(f, a) => {
                let d = match f {
                    Unary::Step => return vec![],
                    Unary::Tanh => {
                        let one = self.one();
                        let yy = self.mul(y, y);
                        let dy = self.sub(one, yy);
                        self.mul(g, dy)
                    }
                    Unary::Sigmoid => {
                        let one = self.one();
                        let omy = self.sub(one, y);
                        let dy = self.mul(y, omy);
                        self.mul(g, dy)
                    }
                    Unary::Softplus => {
                        let s = self.sigmoid(a);
                        self.mul(g, s)
                    }
                    Unary::Sin => {
                        let c = self.cos(a);
                        self.mul(g, c)
                    }
                    Unary::Cos => {
                        let s = self.sin(a);
                        let gs = self.mul(g, s);
                        self.neg(gs)
                    }
                    Unary::Sqrt => {
                        let half = self.scale(g, 0.5);
                        self.div(half, y)
                    }
                    Unary::Recip => {
                        let yy = self.mul(y, y);
                        let gyy = self.mul(g, yy);
                        self.neg(gyy)
                    }
                    Unary::Exp => self.mul(g, y),
                    Unary::Ln => self.div(g, a),
                };
                vec![(a, d)]
            }
            Op::SumAll(a) => vec![(a, self.broadcast_like(g, a))],
            Op::SumLike(a, _) => vec![(a, self.broadcast_like(g, a))],
            Op::BroadcastLike(a, _) => vec![(a, self.sum_like(g, a))],
            Op::SliceCols { a, start, .. } => {
                let d = self.push(Op::PadCols {
                    a: g,
                    start,
                    total: Width::Like(a),
                });
                vec![(a, d)]
            }
            Op::PadCols { a, start, .. } => {
                let d = self.push(Op::SliceCols {
                    a: g,
                    start,
                    len: Width::Like(a),
                });
                vec![(a, d)]
            }
            Op::BatchMatVec { m, v, transpose } => {
                let dm = if transpose { self.batch_outer(v, g) } else { self.batch_outer(g, v) };
                let dm = self.sum_like(dm, m);
                let dv = self.batch_matvec(m, g, !transpose);
                let dv = self.sum_like(dv, v);
                vec![(m, dm), (v, dv)]
            }
            Op::BatchOuter(a, b) => {
                let da = self.batch_matvec(g, b, false);
                let da = self.sum_like(da, a);
                let db = self.batch_matvec(g, a, true);
                let db = self.sum_like(db, b);
                vec![(a, da), (b, db)]
            }
            Op::BatchSolve { m, r, transpose } => {
                let lambda = self.batch_solve(m, g, !transpose);
                let outer = if transpose {
                    self.batch_outer(y, lambda)
                } else {
                    self.batch_outer(lambda, y)
                };
                let dm = self.neg(outer);
                let dm = self.sum_like(dm, m);
                let dr = self.sum_like(lambda, r);
                vec![(m, dm), (r, dr)]
            }
            Op::Select { cond, a, b } => {
                let zero = self.zero();
                let ga = self.select(cond, g, zero);
                let da = self.sum_like(ga, a);
                let gb = self.select(cond, zero, g);
                let db = self.sum_like(gb, b);
                vec![(a, da), (b, db)]
            }
        }
    }

    /// Evaluates the requested nodes. Only their ancestors are computed and
    /// intermediate blocks are released after their last use.
    pub fn eval<'a>(&'a self, outputs: &[NodeId], bindings: &Bindings<'a>) -> Result<Vec<Array2<f64>>> {
        let Some(last) = outputs.iter().map(|o| o.index()).max() else {
            return Ok(vec![]);
        };
        let mut needed = vec![false; last + 1];
        for o in outputs {
            needed[o.index()] = true;
        }
        let mut last_use = vec![0usize; last + 1];
        for i in (0..=last).rev() {
            if !needed[i] {
                continue;
            }
            for o in self.ops[i].operands() {
                let k = o.index();
                needed[k] = true;
                last_use[k] = last_use[k].max(i);
            }
        }
        for o in outputs {
            last_use[o.index()] = usize::MAX;
        }

        let mut values: Vec<Option<Cow<'a, Array2<f64>>>> = vec![None; last + 1];
        for i in 0..=last {
            if !needed[i] {
                continue;
            }
            let value = self.compute(i, &values, bindings)?;
            values[i] = Some(value);
            for o in self.ops[i].operands() {
                if last_use[o.index()] == i {
                    values[o.index()] = None;
                }
            }
        }
        Ok(outputs
            .iter()
            .map(|o| values[o.index()].as_ref().expect("output evaluated").clone().into_owned())
            .collect())
    }

    /// Evaluates a single node.
    pub fn eval_one<'a>(&'a self, output: NodeId, bindings: &Bindings<'a>) -> Result<Array2<f64>> {
        Ok(self.eval(&[output], bindings)?.remove(0))
    }

    fn compute<'a>(&'a self, i: usize, values: &[Option<Cow<'a, Array2<f64>>>], bindings: &Bindings<'a>) -> Result<Cow<'a, Array2<f64>>> {
        let val = |n: NodeId| -> &Array2<f64> { values[n.index()].as_ref().expect("operand evaluated") };
        let out = match &self.ops[i] {
            Op::Leaf => {
                let id = NodeId(i as u32);
                return bindings
                    .values
                    .get(&id)
                    .map(|v| Cow::Borrowed(*v))
                    .ok_or_else(|| MechError::dims("graph leaf binding", "bound leaf", format!("unbound node {i}")));
            }
            Op::Const(c) => return Ok(Cow::Borrowed(c.as_ref())),
            Op::OnesLike(a) => Array2::ones(val(*a).dim()),
            Op::ZerosLike(a) => Array2::zeros(val(*a).dim()),
            Op::MatMul { a, b, ta, tb } => {
                let av = orient(val(*a), *ta);
                let bv = orient(val(*b), *tb);
                if av.ncols() != bv.nrows() {
                    return Err(MechError::dims("matmul", format!("inner dimension {}", av.ncols()), bv.nrows()));
                }
                av.dot(&bv)
            }
            Op::Add(a, b) => binary(val(*a), val(*b), |x, y| x + y)?,
            Op::Sub(a, b) => binary(val(*a), val(*b), |x, y| x - y)?,
            Op::Mul(a, b) => binary(val(*a), val(*b), |x, y| x * y)?,
            Op::Div(a, b) => binary(val(*a), val(*b), |x, y| x / y)?,
            Op::Neg(a) => val(*a).mapv(|x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                val(*a).mapv(|x| c * x)
            }
            Op::Unary(f, a) => {
                let f = *f;
                val(*a).mapv(|x| f.apply(x))
            }
            Op::SumAll(a) => Array2::from_elem((1, 1), val(*a).sum()),
            Op::SumLike(a, like) => sum_to(val(*a), val(*like).dim())?,
            Op::BroadcastLike(a, like) => {
                let target = val(*like).dim();
                let a = val(*a);
                a.broadcast(target)
                    .ok_or_else(|| MechError::dims("broadcast", format!("{target:?}"), format!("{:?}", a.dim())))?
                    .to_owned()
            }
            Op::SliceCols { a, start, len } => {
                let a = val(*a);
                let len = match len {
                    Width::Fixed(n) => *n,
                    Width::Like(n) => val(*n).ncols(),
                };
                if start + len > a.ncols() {
                    return Err(MechError::IndexOutOfRange {
                        index: start + len - 1,
                        dim: a.ncols(),
                    });
                }
                a.slice(s![.., *start..start + len]).to_owned()
            }
            Op::PadCols { a, start, total } => {
                let a = val(*a);
                let total = match total {
                    Width::Fixed(n) => *n,
                    Width::Like(n) => val(*n).ncols(),
                };
                if start + a.ncols() > total {
                    return Err(MechError::IndexOutOfRange {
                        index: start + a.ncols() - 1,
                        dim: total,
                    });
                }
                let mut out = Array2::zeros((a.nrows(), total));
                out.slice_mut(s![.., *start..start + a.ncols()]).assign(a);
                out
            }
            Op::BatchMatVec { m, v, transpose } => batch_matvec(val(*m), val(*v), *transpose)?,
            Op::BatchOuter(a, b) => batch_outer(val(*a), val(*b))?,
            Op::BatchSolve { m, r, transpose } => batch_solve(val(*m), val(*r), *transpose)?,
            Op::Select { cond, a, b } => select(val(*cond), val(*a), val(*b))?,
        };
        Ok(Cow::Owned(out))
    }
}

fn orient(a: &Array2<f64>, t: bool) -> ArrayView2<'_, f64> {
    if t {
        a.t()
    } else {
        a.view()
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b || b == 1 {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else {
        None
    }
}

fn broadcast_shape(shapes: &[(usize, usize)]) -> Result<(usize, usize)> {
    let mut out = shapes[0];
    for s in &shapes[1..] {
        let r = broadcast_dim(out.0, s.0);
        let c = broadcast_dim(out.1, s.1);
        match (r, c) {
            (Some(r), Some(c)) => out = (r, c),
            _ => return Err(MechError::dims("elementwise broadcast", format!("{out:?}"), format!("{s:?}"))),
        }
    }
    Ok(out)
}

fn binary(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Array2<f64>> {
    if a.dim() == b.dim() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return Ok(out);
    }
    let shape = broadcast_shape(&[a.dim(), b.dim()])?;
    let av = a.broadcast(shape).expect("checked shape");
    let bv = b.broadcast(shape).expect("checked shape");
    Ok(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

fn sum_to(a: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (r, c) = a.dim();
    if (r, c) == target {
        return Ok(a.clone());
    }
    let rows_ok = target.0 == r || target.0 == 1;
    let cols_ok = target.1 == c || target.1 == 1;
    if !rows_ok || !cols_ok {
        return Err(MechError::dims("sum reduction", format!("{target:?}"), format!("{:?}", (r, c))));
    }
    let mut out = a.clone();
    if target.0 == 1 && r != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && c != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    Ok(out)
}

fn select(cond: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let shape = broadcast_shape(&[cond.dim(), a.dim(), b.dim()])?;
    let c = cond.broadcast(shape).expect("checked shape");
    let av = a.broadcast(shape).expect("checked shape");
    let bv = b.broadcast(shape).expect("checked shape");
    Ok(Zip::from(&c).and(&av).and(&bv).map_collect(|&c, &x, &y| if c > 0.0 { x } else { y }))
}

fn batch_rows(a: usize, b: usize) -> Result<usize> {
    broadcast_dim(a, b).ok_or_else(|| MechError::dims("batched operation rows", a, b))
}

fn square_side(cols: usize) -> Option<usize> {
    let n = (cols as f64).sqrt().round() as usize;
    (n * n == cols).then_some(n)
}

fn batch_matvec(m: &Array2<f64>, v: &Array2<f64>, transpose: bool) -> Result<Array2<f64>> {
    let n = v.ncols();
    if m.ncols() != n * n {
        return Err(MechError::dims("batch matvec", n * n, m.ncols()));
    }
    let rows = batch_rows(m.nrows(), v.nrows())?;
    let mut out = Array2::zeros((rows, n));
    for b in 0..rows {
        let mr = m.row(if m.nrows() == 1 { 0 } else { b });
        let vr = v.row(if v.nrows() == 1 { 0 } else { b });
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let mij = if transpose { mr[j * n + i] } else { mr[i * n + j] };
                acc += mij * vr[j];
            }
            out[[b, i]] = acc;
        }
    }
    Ok(out)
}

fn batch_outer(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.ncols();
    if b.ncols() != n {
        return Err(MechError::dims("batch outer product", n, b.ncols()));
    }
    let rows = batch_rows(a.nrows(), b.nrows())?;
    let mut out = Array2::zeros((rows, n * n));
    for r in 0..rows {
        let ar = a.row(if a.nrows() == 1 { 0 } else { r });
        let br = b.row(if b.nrows() == 1 { 0 } else { r });
        for i in 0..n {
            for j in 0..n {
                out[[r, i * n + j]] = ar[i] * br[j];
            }
        }
    }
    Ok(out)
}

fn batch_solve(m: &Array2<f64>, r: &Array2<f64>, transpose: bool) -> Result<Array2<f64>> {
    let n = r.ncols();
    if m.ncols() != n * n || square_side(m.ncols()) != Some(n) {
        return Err(MechError::dims("batch solve", n * n, m.ncols()));
    }
    let rows = batch_rows(m.nrows(), r.nrows())?;
    let mut out = Array2::zeros((rows, n));
    let mut a = vec![0.0; n * n];
    for b in 0..rows {
        let mr = m.row(if m.nrows() == 1 { 0 } else { b });
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = if transpose { mr[j * n + i] } else { mr[i * n + j] };
            }
        }
        let lu = Lu::factor(&a, n)?;
        let rr = r.row(if r.nrows() == 1 { 0 } else { b });
        let x = lu.solve(rr.iter().copied().collect());
        for (i, xi) in x.into_iter().enumerate() {
            out[[b, i]] = xi;
        }
    }
    Ok(out)
}

/// Dense LU factorisation with partial pivoting for the small systems of
/// the Euler–Lagrange solve.
pub(crate) struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors a row-major `n x n` matrix, rejecting singular or
    /// ill-conditioned input.
    pub(crate) fn factor(a: &[f64], n: usize) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(MechError::NonFinite("linear system matrix".into()));
        }
        let norm = one_norm(a, n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
                .expect("nonempty range");
            if lu[p * n + k] == 0.0 {
                return Err(MechError::Degenerate { condition: f64::INFINITY });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        let fac = Lu { n, lu, perm };
        if n > 1 {
            let mut inv = vec![0.0; n * n];
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let col = fac.solve(e);
                for i in 0..n {
                    inv[i * n + j] = col[i];
                }
            }
            let condition = norm * one_norm(&inv, n);
            if !(condition <= MAX_CONDITION) {
                return Err(MechError::Degenerate { condition });
            }
        }
        Ok(fac)
    }

    pub(crate) fn solve(&self, rhs: Vec<f64>) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n).map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn eval1(g: &Graph, node: NodeId, b: &Bindings) -> Array2<f64> {
        g.eval_one(node, b).unwrap()
    }

    #[test]
    fn product_rule_and_nested_derivative() {
        // f(x) = x^3 -> f' = 3x^2 -> f'' = 6x
        let mut g = Graph::new();
        let x = g.leaf();
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let d1 = g.grad(x3, &[x])[0];
        let d2 = g.grad(d1, &[x])[0];
        let d3 = g.grad(d2, &[x])[0];
        let xv = array![[2.0], [-1.0]];
        let b = Bindings::new().with(x, &xv);
        assert_eq!(eval1(&g, d1, &b), array![[12.0], [3.0]]);
        assert_eq!(eval1(&g, d2, &b), array![[12.0], [-6.0]]);
        assert_eq!(eval1(&g, d3, &b), array![[6.0], [6.0]]);
    }

    #[test]
    fn matmul_gradients_all_transpose_flags() {
        let av = array![[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]];
        let bv = array![[2.0, -3.0], [1.0, 0.25], [-1.0, 2.0]];
        for (ta, tb) in [(false, true), (true, false)] {
            let mut g = Graph::new();
            let a = g.leaf();
            let b = g.leaf();
            let c = g.matmul_t(a, b, ta, tb);
            let c2 = g.square(c);
            let loss = g.sum_all(c2);
            let grads = g.grad(loss, &[a, b]);
            let bind = Bindings::new().with(a, &av).with(b, &bv);
            let ga = eval1(&g, grads[0], &bind);
            let gb = eval1(&g, grads[1], &bind);
            let h = 1e-6;
            for (which, gv) in [(0, &ga), (1, &gb)] {
                for idx in 0..6 {
                    let (r, col) = (idx / 2, idx % 2);
                    let mut ap = av.clone();
                    let mut bp = bv.clone();
                    let mut am = av.clone();
                    let mut bm = bv.clone();
                    if which == 0 {
                        ap[[r, col]] += h;
                        am[[r, col]] -= h;
                    } else {
                        bp[[r, col]] += h;
                        bm[[r, col]] -= h;
                    }
                    let fp = eval1(&g, loss, &Bindings::new().with(a, &ap).with(b, &bp))[[0, 0]];
                    let fm = eval1(&g, loss, &Bindings::new().with(a, &am).with(b, &bm))[[0, 0]];
                    let fd = (fp - fm) / (2.0 * h);
                    assert!((fd - gv[[r, col]]).abs() < 1e-6 * (1.0 + fd.abs()), "ta={ta} tb={tb}");
                }
            }
        }
    }

    #[test]
    fn broadcasting_adjoint_sums_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf();
        let b = g.leaf();
        let y = g.add(x, b);
        let gb = g.grad(y, &[b])[0];
        let xv = Array2::zeros((4, 3));
        let bv = array![[1.0, 2.0, 3.0]];
        let out = eval1(&g, gb, &Bindings::new().with(x, &xv).with(b, &bv));
        assert_eq!(out, array![[4.0, 4.0, 4.0]]);
    }

    #[test]
    fn slice_and_pad_are_adjoint() {
        let mut g = Graph::new();
        let x = g.leaf();
        let s = g.slice_cols(x, 1, 2);
        let w = g.constant(array![[3.0, 5.0]]);
        let y = g.mul(s, w);
        let gx = g.grad(y, &[x])[0];
        let xv = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(eval1(&g, gx, &Bindings::new().with(x, &xv)), array![[0.0, 3.0, 5.0, 0.0]]);
    }

    #[test]
    fn batch_solve_and_its_gradient() {
        let mut g = Graph::new();
        let m = g.leaf();
        let r = g.leaf();
        let x = g.batch_solve(m, r, false);
        let x2 = g.square(x);
        let loss = g.sum_all(x2);
        let grads = g.grad(loss, &[m, r]);
        let mv = array![[4.0, 1.0, 2.0, 3.0]];
        let rv = array![[1.0, 2.0]];
        let b = Bindings::new().with(m, &mv).with(r, &rv);
        let xs = eval1(&g, x, &b);
        // [[4,1],[2,3]] x = [1,2] -> x = [0.1, 0.6]
        assert!((xs[[0, 0]] - 0.1).abs() < 1e-14 && (xs[[0, 1]] - 0.6).abs() < 1e-14);
        let gm = eval1(&g, grads[0], &b);
        let h = 1e-6;
        for k in 0..4 {
            let mut mp = mv.clone();
            mp[[0, k]] += h;
            let mut mm = mv.clone();
            mm[[0, k]] -= h;
            let fp = eval1(&g, loss, &Bindings::new().with(m, &mp).with(r, &rv))[[0, 0]];
            let fm = eval1(&g, loss, &Bindings::new().with(m, &mm).with(r, &rv))[[0, 0]];
            assert!(((fp - fm) / (2.0 * h) - gm[[0, k]]).abs() < 1e-7);
        }
    }

    #[test]
    fn singular_solve_is_rejected() {
        let mut g = Graph::new();
        let m = g.leaf();
        let r = g.leaf();
        let x = g.batch_solve(m, r, false);
        let mv = array![[1.0, 2.0, 2.0, 4.0]];
        let rv = array![[1.0, 1.0]];
        let err = g.eval_one(x, &Bindings::new().with(m, &mv).with(r, &rv)).unwrap_err();
        assert!(matches!(err, MechError::Degenerate { .. }));
    }

    #[test]
    fn select_routes_gradient_to_chosen_branch() {
        let mut g = Graph::new();
        let c = g.leaf();
        let a = g.leaf();
        let b = g.leaf();
        let y = g.select(c, a, b);
        let grads = g.grad(y, &[a, b]);
        let cv = array![[1.0, -1.0]];
        let av = array![[5.0, 6.0]];
        let bv = array![[7.0, 8.0]];
        let bind = Bindings::new().with(c, &cv).with(a, &av).with(b, &bv);
        assert_eq!(eval1(&g, y, &bind), array![[5.0, 8.0]]);
        assert_eq!(eval1(&g, grads[0], &bind), array![[1.0, 0.0]]);
        assert_eq!(eval1(&g, grads[1], &bind), array![[0.0, 1.0]]);
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf();
        let z = g.leaf();
        let y = g.sin(x);
        let gz = g.grad(y, &[z])[0];
        let xv = array![[1.0]];
        let zv = array![[2.0, 3.0]];
        assert_eq!(eval1(&g, gz, &Bindings::new().with(x, &xv).with(z, &zv)), array![[0.0, 0.0]]);
    }

    #[test]
    fn unbound_leaf_and_shape_errors() {
        let mut g = Graph::new();
        let x = g.leaf();
        let w = g.constant(Array2::zeros((3, 1)));
        let y = g.matmul(x, w);
        assert!(g.eval_one(y, &Bindings::new()).is_err());
        let xv = Array2::zeros((1, 2));
        assert!(matches!(g.eval_one(y, &Bindings::new().with(x, &xv)), Err(MechError::DimensionMismatch { .. })));
    }

    #[test]
    fn smooth_unary_derivatives_match_finite_differences() {
        for f in [
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Sin,
            Unary::Cos,
            Unary::Sqrt,
            Unary::Recip,
            Unary::Exp,
            Unary::Ln,
        ] {
            let mut g = Graph::new();
            let x = g.leaf();
            let y = g.unary(f, x);
            let d1 = g.grad(y, &[x])[0];
            let d2 = g.grad(d1, &[x])[0];
            let x0 = 0.7;
            let h = 1e-4;
            let at = |v: f64, node: NodeId| {
                let xv = Array2::from_elem((1, 1), v);
                g.eval_one(node, &Bindings::new().with(x, &xv)).unwrap()[[0, 0]]
            };
            let fd1 = (at(x0 + h, y) - at(x0 - h, y)) / (2.0 * h);
            let fd2 = (at(x0 + h, d1) - at(x0 - h, d1)) / (2.0 * h);
            let (a1, a2) = (at(x0, d1), at(x0, d2));
            assert!((fd1 - a1).abs() < 1e-7 * a1.abs().max(1.0), "{f:?} first derivative");
            assert!((fd2 - a2).abs() < 1e-7 * a2.abs().max(1.0) * 10.0, "{f:?} second derivative");
        }
    }
}
