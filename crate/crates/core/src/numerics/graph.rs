//! Static computation graph with forward evaluation and reverse-mode
//! gradients.
//!
//! Nodes are appended in topological order: every node may only reference
//! nodes created before it, so the graph is acyclic by construction and
//! evaluation is a single forward sweep. Output shapes are inferred and
//! validated when a node is added. Leaves are named placeholders that are
//! bound to concrete arrays at evaluation time.

use std::collections::BTreeMap;
use std::fmt;

use super::{Array, NumericsError};

/// Guard used by [`Graph::l2_normalize`] for near-zero rows.
pub const NORM_GUARD: f64 = 1e-12;

/// Named arrays bound to graph leaves.
pub type Bindings = BTreeMap<String, Array>;

/// Gradients keyed by leaf name.
pub type Gradients = BTreeMap<String, Array>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for error messages and the gradient fault hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Shift,
    Concat,
    Gather,
    Relu,
    Hinge,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    L2Normalize,
    SqDist,
    PairwiseSqDist,
    Sum,
    Max,
    Min,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Const,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Shift,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::Relu,
        OpKind::Hinge,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::L2Normalize,
        OpKind::SqDist,
        OpKind::PairwiseSqDist,
        OpKind::Sum,
        OpKind::Max,
        OpKind::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Const => "const",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::Relu => "relu",
            OpKind::Hinge => "hinge",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SqDist => "sq_dist",
            OpKind::PairwiseSqDist => "pairwise_sq_dist",
            OpKind::Sum => "sum",
            OpKind::Max => "max",
            OpKind::Min => "min",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Array),
    MatMul(NodeId, NodeId),
    /// `rhs` may be a `[1, n]` row broadcast over the rows of `lhs`.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Relu(NodeId),
    Hinge(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Normalize(NodeId),
    SqDist(NodeId, NodeId),
    PairwiseSqDist(NodeId),
    Sum(NodeId),
    Max(NodeId),
    Min(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::Const(_) => OpKind::Const,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Concat(_) => OpKind::Concat,
            Op::Gather(..) => OpKind::Gather,
            Op::Relu(_) => OpKind::Relu,
            Op::Hinge(_) => OpKind::Hinge,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::SqDist(..) => OpKind::SqDist,
            Op::PairwiseSqDist(_) => OpKind::PairwiseSqDist,
            Op::Sum(_) => OpKind::Sum,
            Op::Max(_) => OpKind::Max,
            Op::Min(_) => OpKind::Min,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Scales the gradient emitted by every node of one kind. Only meant for
/// exercising gradient checks against a deliberately broken backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub kind: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    fault: Option<GradFault>,
}

/// Forward values of every node, plus the recorded argindex of each
/// max/min reduction.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    values: Vec<Array>,
    arg: Vec<Option<usize>>,
}

impl Trace {
    pub fn value(&self, node: NodeId) -> &Array {
        &self.values[node.0]
    }

    /// Scalar value of a node; panics if the node is not scalar.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0]
            .item()
            .expect("scalar() called on a non-scalar node")
    }

    pub fn argindex(&self, node: NodeId) -> Option<usize> {
        self.arg[node.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub value: f64,
    pub grads: Gradients,
}

fn shape_err(node: usize, kind: OpKind, detail: String) -> NumericsError {
    NumericsError::Shape { node, op: kind, detail }
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

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.nodes[node.0].op.kind()
    }

    /// Leaf names with their node ids, in name order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn set_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, kind: OpKind, ids: &[NodeId]) -> Result<(), NumericsError> {
        let next = self.nodes.len();
        for id in ids {
            if id.0 >= next {
                return Err(shape_err(
                    next,
                    kind,
                    format!("input node #{} does not exist", id.0),
                ));
            }
        }
        Ok(())
    }

    // ---- construction -------------------------------------------------

    /// Declares a named leaf. Re-declaring a name returns the existing
    /// leaf if the shape matches.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(shape_err(
                    id.0,
                    OpKind::Leaf,
                    format!(
                        "leaf `{name}` redeclared with shape {:?}, was {:?}",
                        shape, self.nodes[id.0].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(OpKind::MatMul, &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                self.len(),
                OpKind::MatMul,
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(OpKind::Add, &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let row_broadcast = sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1];
        if sa != sb && !row_broadcast {
            return Err(shape_err(
                self.len(),
                OpKind::Add,
                format!("cannot add {sb:?} to {sa:?}"),
            ));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    fn same_shape(&self, kind: OpKind, a: NodeId, b: NodeId) -> Result<Vec<usize>, NumericsError> {
        self.check_ids(kind, &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                self.len(),
                kind,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.same_shape(OpKind::Sub, a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.same_shape(OpKind::Mul, a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::Scale, a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, factor), shape))
    }

    pub fn shift(&mut self, a: NodeId, offset: f64) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::Shift, a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Shift(a, offset), shape))
    }

    /// Concatenates along the last axis. All inputs must have rank 1 or
    /// all rank 2 with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        self.check_ids(OpKind::Concat, parts)?;
        let Some(&first) = parts.first() else {
            return Err(shape_err(self.len(), OpKind::Concat, "no inputs".into()));
        };
        let lead: Vec<usize> = {
            let s = self.shape(first);
            if s.is_empty() || s.len() > 2 {
                return Err(shape_err(
                    self.len(),
                    OpKind::Concat,
                    format!("unsupported rank {}", s.len()),
                ));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err(
                    self.len(),
                    OpKind::Concat,
                    format!("input {:?} incompatible with leading dims {:?}", s, lead),
                ));
            }
            width += s[lead.len()];
        }
        let mut shape = lead;
        shape.push(width);
        Ok(self.push(Op::Concat(parts.to_vec()), shape))
    }

    /// Selects entries of `a` by flat (row-major) index into a new array of
    /// the given shape.
    pub fn gather(
        &mut self,
        a: NodeId,
        indices: Vec<usize>,
        shape: &[usize],
    ) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::Gather, a)?;
        let n: usize = self.shape(a).iter().product();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err(
                self.len(),
                OpKind::Gather,
                format!("index {bad} out of range for {} entries", n),
            ));
        }
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err(
                self.len(),
                OpKind::Gather,
                format!("{} indices cannot fill shape {:?}", indices.len(), shape),
            ));
        }
        Ok(self.push(Op::Gather(a, indices), shape.to_vec()))
    }

    /// Single entry of `a` as a scalar node.
    pub fn pick(&mut self, a: NodeId, flat_index: usize) -> Result<NodeId, NumericsError> {
        self.gather(a, vec![flat_index], &[])
    }

    /// Rows `rows` of a matrix, stacked.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::Gather, a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err(
                self.len(),
                OpKind::Gather,
                format!("gather_rows needs a matrix, got {s:?}"),
            ));
        }
        let w = s[1];
        let mut idx = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            idx.extend(r * w..(r + 1) * w);
        }
        self.gather(a, idx, &[rows.len(), w])
    }

    fn unary_check(&self, kind: OpKind, a: NodeId) -> Result<(), NumericsError> {
        self.check_ids(kind, &[a])
    }

    fn elementwise(&mut self, kind: OpKind, a: NodeId, op: Op) -> Result<NodeId, NumericsError> {
        self.unary_check(kind, a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise(OpKind::Relu, a, Op::Relu(a))
    }

    /// `max(0, x)`; identical to relu but kept distinct so loss hinges are
    /// identifiable in traces and fault injection.
    pub fn hinge(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise(OpKind::Hinge, a, Op::Hinge(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise(OpKind::Sigmoid, a, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise(OpKind::Tanh, a, Op::Tanh(a))
    }

    fn last_axis(&mut self, kind: OpKind, a: NodeId, op: Op) -> Result<NodeId, NumericsError> {
        self.unary_check(kind, a)?;
        let s = self.shape(a);
        if s.is_empty() || *s.last().unwrap() == 0 {
            return Err(shape_err(
                self.len(),
                kind,
                format!("needs a non-empty last axis, got {s:?}"),
            ));
        }
        let shape = s.to_vec();
        Ok(self.push(op, shape))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.last_axis(OpKind::Softmax, a, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.last_axis(OpKind::LogSoftmax, a, Op::LogSoftmax(a))
    }

    /// Normalizes along the last axis: `x / max(|x|, NORM_GUARD)`.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.last_axis(OpKind::L2Normalize, a, Op::L2Normalize(a))
    }

    /// Squared Euclidean distance between two same-shaped arrays.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape(OpKind::SqDist, a, b)?;
        Ok(self.push(Op::SqDist(a, b), Vec::new()))
    }

    /// `n x n` matrix of squared distances between the rows of `a`.
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::PairwiseSqDist, a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(
                self.len(),
                OpKind::PairwiseSqDist,
                format!("needs a matrix, got {s:?}"),
            ));
        }
        let n = s[0];
        Ok(self.push(Op::PairwiseSqDist(a), vec![n, n]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary_check(OpKind::Sum, a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    fn reduce_extreme(&mut self, kind: OpKind, a: NodeId, op: Op) -> Result<NodeId, NumericsError> {
        self.unary_check(kind, a)?;
        if self.shape(a).iter().product::<usize>() == 0 {
            return Err(shape_err(self.len(), kind, "reduction over empty input".into()));
        }
        Ok(self.push(op, Vec::new()))
    }

    /// Maximum entry; the first maximal flat index is recorded.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.reduce_extreme(OpKind::Max, a, Op::Max(a))
    }

    /// Minimum entry; the first minimal flat index is recorded.
    pub fn min(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.reduce_extreme(OpKind::Min, a, Op::Min(a))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId, NumericsError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Array::scalar(0.0)));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    // ---- evaluation ---------------------------------------------------

    /// Forward sweep over every node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Trace, NumericsError> {
        let mut trace = Trace::default();
        self.extend(&mut trace, bindings)?;
        Ok(trace)
    }

    /// Evaluates the nodes added since `trace` was last extended. Lets a
    /// caller interleave construction with evaluation.
    pub fn extend(&self, trace: &mut Trace, bindings: &Bindings) -> Result<(), NumericsError> {
        for id in trace.values.len()..self.nodes.len() {
            let (value, arg) = self.eval_node(id, &trace.values, bindings)?;
            trace.values.push(value);
            trace.arg.push(arg);
        }
        Ok(())
    }

    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Array, NumericsError> {
        let mut trace = self.forward(bindings)?;
        Ok(trace.values.swap_remove(root.0))
    }

    fn eval_node(
        &self,
        id: usize,
        vals: &[Array],
        bindings: &Bindings,
    ) -> Result<(Array, Option<usize>), NumericsError> {
        let node = &self.nodes[id];
        let v = |n: &NodeId| &vals[n.0];
        let out = match &node.op {
            Op::Leaf(name) => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| NumericsError::Unbound { leaf: name.clone() })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(NumericsError::BindingShape {
                        leaf: name.clone(),
                        expected: node.shape.clone(),
                        found: bound.shape().to_vec(),
                    });
                }
                if !bound.is_finite() {
                    return Err(NumericsError::NonFiniteBinding { leaf: name.clone() });
                }
                bound.clone()
            }
            Op::Const(a) => a.clone(),
            Op::MatMul(a, b) => matmul(v(a), v(b)),
            Op::Add(a, b) => {
                let (x, y) = (v(a), v(b));
                let w = y.len();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, xv)| xv + y.data()[i % w])
                    .collect();
                Array::from_parts(node.shape.clone(), data)
            }
            Op::Sub(a, b) => zip_map(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(v(a), v(b), |x, y| x * y),
            Op::Scale(a, c) => map(v(a), |x| x * c),
            Op::Shift(a, c) => map(v(a), |x| x + c),
            Op::Concat(parts) => {
                let rows: usize = node.shape[..node.shape.len() - 1].iter().product();
                let mut data = Vec::with_capacity(node.shape.iter().product());
                for r in 0..rows {
                    for p in parts {
                        let pa = v(p);
                        let w = pa.last_dim();
                        data.extend_from_slice(&pa.data()[r * w..(r + 1) * w]);
                    }
                }
                Array::from_parts(node.shape.clone(), data)
            }
            Op::Gather(a, idx) => {
                let src = v(a).data();
                Array::from_parts(node.shape.clone(), idx.iter().map(|&i| src[i]).collect())
            }
            Op::Relu(a) | Op::Hinge(a) => map(v(a), |x| x.max(0.0)),
            Op::Sigmoid(a) => map(v(a), sigmoid),
            Op::Tanh(a) => map(v(a), f64::tanh),
            Op::Softmax(a) => rowwise(v(a), softmax_row),
            Op::LogSoftmax(a) => rowwise(v(a), log_softmax_row),
            Op::L2Normalize(a) => rowwise(v(a), |row, out| {
                let n = norm(row).max(NORM_GUARD);
                for (o, x) in out.iter_mut().zip(row) {
                    *o = x / n;
                }
            }),
            Op::SqDist(a, b) => {
                let s = v(a)
                    .data()
                    .iter()
                    .zip(v(b).data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                Array::scalar(s)
            }
            Op::PairwiseSqDist(a) => pairwise(v(a)),
            Op::Sum(a) => Array::scalar(v(a).data().iter().sum()),
            Op::Max(a) => {
                let (i, m) = extreme(v(a).data(), |c, best| c > best);
                return Ok((Array::scalar(m), Some(i)));
            }
            Op::Min(a) => {
                let (i, m) = extreme(v(a).data(), |c, best| c < best);
                return Ok((Array::scalar(m), Some(i)));
            }
        };
        if !out.is_finite() {
            return Err(NumericsError::NonFiniteValue {
                node: id,
                op: node.op.kind(),
            });
        }
        Ok((out, None))
    }

    // ---- differentiation ----------------------------------------------

    /// Gradient of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: NodeId, bindings: &Bindings) -> Result<Backward, NumericsError> {
        let trace = self.forward(bindings)?;
        let grads = self.backward_trace(root, &trace)?;
        Ok(Backward {
            value: trace.scalar(root),
            grads,
        })
    }

    /// Reverse sweep over an existing forward trace.
    pub fn backward_trace(&self, root: NodeId, trace: &Trace) -> Result<Gradients, NumericsError> {
        if !self.nodes[root.0].shape.is_empty() {
            return Err(NumericsError::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        if trace.len() <= root.0 {
            return Err(NumericsError::StaleTrace);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        let vals = &trace.values;

        for id in (0..=root.0).rev() {
            let Some(mut g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(f) = self.fault {
                if f.kind == node.op.kind() {
                    g.iter_mut().for_each(|x| *x *= f.factor);
                }
            }
            match &node.op {
                Op::Leaf(_) | Op::Const(_) => {
                    adj[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * y.data()[p * n + j];
                                gb[p * n + j] += gij * x.data()[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    let w = vals[b.0].len();
                    let mut gb = vec![0.0; w];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % w] += gi;
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|x| -x).collect();
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (vals[a.0].data(), vals[b.0].data());
                    let ga = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                    let gb = g.iter().zip(x).map(|(gi, xi)| gi * xi).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::Shift(a, _) => accumulate(&mut adj, *a, g),
                Op::Concat(parts) => {
                    let rows: usize = node.shape[..node.shape.len() - 1].iter().product();
                    let width = *node.shape.last().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let w = vals[p.0].last_dim();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        accumulate(&mut adj, *p, gp);
                        offset += w;
                    }
                }
                Op::Gather(a, idx) => {
                    let mut ga = vec![0.0; vals[a.0].len()];
                    for (gi, &i) in g.iter().zip(idx) {
                        ga[i] += gi;
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) | Op::Hinge(a) => {
                    let x = vals[a.0].data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = vals[id].data();
                    let ga = g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = vals[id].data();
                    let ga = g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &vals[id];
                    let w = y.last_dim();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..g.len() / w {
                        let yr = &y.data()[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..w {
                            ga[r * w + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &vals[id];
                    let w = y.last_dim();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..g.len() / w {
                        let yr = &y.data()[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..w {
                            ga[r * w + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::L2Normalize(a) => {
                    let x = &vals[a.0];
                    let y = &vals[id];
                    let w = y.last_dim();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..g.len() / w {
                        let xr = &x.data()[r * w..(r + 1) * w];
                        let yr = &y.data()[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let n = norm(xr);
                        if n > NORM_GUARD {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..w {
                                ga[r * w + c] = (gr[c] - yr[c] * dot) / n;
                            }
                        } else {
                            for c in 0..w {
                                ga[r * w + c] = gr[c] / NORM_GUARD;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SqDist(a, b) => {
                    let (x, y) = (vals[a.0].data(), vals[b.0].data());
                    let ga: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| 2.0 * g[0] * (xi - yi)).collect();
                    let gb = ga.iter().map(|v| -v).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::PairwiseSqDist(a) => {
                    let x = &vals[a.0];
                    let (n, d) = (x.shape()[0], x.shape()[1]);
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..n {
                            let c = g[i * n + j];
                            if c == 0.0 || i == j {
                                continue;
                            }
                            for k in 0..d {
                                let diff = x.data()[i * d + k] - x.data()[j * d + k];
                                ga[i * d + k] += 2.0 * c * diff;
                                ga[j * d + k] -= 2.0 * c * diff;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let n = vals[a.0].len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Max(a) | Op::Min(a) => {
                    let mut ga = vec![0.0; vals[a.0].len()];
                    let i = trace.arg[id].expect("reduction without recorded argindex");
                    ga[i] = g[0];
                    accumulate(&mut adj, *a, ga);
                }
            }
        }

        let mut grads = Gradients::new();
        for (name, id) in &self.leaves {
            if id.0 > root.0 {
                grads.insert(name.clone(), Array::zeros(&self.nodes[id.0].shape));
                continue;
            }
            let data = adj[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[id.0].shape.iter().product()]);
            grads.insert(
                name.clone(),
                Array::from_parts(self.nodes[id.0].shape.clone(), data),
            );
        }
        Ok(grads)
    }

    /// Discrete state of every kink in the trace: the sign class of each
    /// relu/hinge input and the argindex of each max/min. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self, trace: &Trace) -> Vec<usize> {
        let mut sig = Vec::new();
        for (id, node) in self.nodes.iter().enumerate().take(trace.len()) {
            match &node.op {
                Op::Relu(a) | Op::Hinge(a) => {
                    sig.extend(trace.values[a.0].data().iter().map(|&x| {
                        if x > 0.0 {
                            2
                        } else if x == 0.0 {
                            1
                        } else {
                            0
                        }
                    }));
                }
                Op::Max(_) | Op::Min(_) => sig.push(trace.arg[id].unwrap_or(usize::MAX)),
                _ => {}
            }
        }
        sig
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], node: NodeId, g: Vec<f64>) {
    match &mut adj[node.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
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

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn rowwise(a: &Array, f: impl Fn(&[f64], &mut [f64])) -> Array {
    let w = a.last_dim();
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.data().chunks(w).zip(out.chunks_mut(w)) {
        f(src, dst);
    }
    Array::from_parts(a.shape().to_vec(), out)
}

fn matmul(x: &Array, y: &Array) -> Array {
    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let xv = x.data()[i * k + p];
            if xv == 0.0 {
                continue;
            }
            let yrow = &y.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, yv) in orow.iter_mut().zip(yrow) {
                *o += xv * yv;
            }
        }
    }
    Array::from_parts(vec![m, n], out)
}

fn pairwise(x: &Array) -> Array {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..d)
                .map(|k| {
                    let diff = x.data()[i * d + k] - x.data()[j * d + k];
                    diff * diff
                })
                .sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Array::from_parts(vec![n, n], out)
}

fn extreme(data: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, data[0]);
    for (i, &x) in data.iter().enumerate().skip(1) {
        if better(x, best.1) {
            best = (i, x);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Array)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        let out = g.evaluate(y, &Bindings::new()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.evaluate(y, &Bindings::new()).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        let out = g.evaluate(y, &Bindings::new()).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let b = g
            .backward(s, &bind(&[("x", Array::vector(vec![1.0, 2.0]).unwrap())]))
            .unwrap();
        assert_eq!(b.value, 5.0);
        assert_eq!(b.grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn max_gradient_is_one_hot() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3]).unwrap();
        let m = g.max(x).unwrap();
        let b = g
            .backward(m, &bind(&[("x", Array::vector(vec![1.0, 5.0, 3.0]).unwrap())]))
            .unwrap();
        assert_eq!(b.grads["x"].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_ties_pick_first_index() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3]).unwrap();
        let m = g.max(x).unwrap();
        let t = g
            .forward(&bind(&[("x", Array::vector(vec![2.0, 7.0, 7.0]).unwrap())]))
            .unwrap();
        assert_eq!(t.argindex(m), Some(1));
    }

    #[test]
    fn hinge_at_origin_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let h = g.hinge(x).unwrap();
        let b = g.backward(h, &bind(&[("x", Array::scalar(0.0))])).unwrap();
        assert_eq!(b.grads["x"].item(), Some(0.0));
    }

    #[test]
    fn triplet_gradient_closed_form() {
        // -d/da [D(a,p) - D(a,n)] = -2(x_n - x_p)
        let mut g = Graph::new();
        let a = g.leaf("a", &[3]).unwrap();
        let p = g.leaf("p", &[3]).unwrap();
        let n = g.leaf("n", &[3]).unwrap();
        let dp = g.sq_dist(a, p).unwrap();
        let dn = g.sq_dist(a, n).unwrap();
        let tri = g.sub(dp, dn).unwrap();
        let xa = vec![0.1, -0.4, 0.7];
        let xp = vec![0.3, 0.2, -0.5];
        let xn = vec![-0.6, 0.9, 0.05];
        let b = g
            .backward(
                tri,
                &bind(&[
                    ("a", Array::vector(xa.clone()).unwrap()),
                    ("p", Array::vector(xp.clone()).unwrap()),
                    ("n", Array::vector(xn.clone()).unwrap()),
                ]),
            )
            .unwrap();
        for k in 0..3 {
            let neg_grad_a = -b.grads["a"].data()[k];
            assert!((neg_grad_a - (-2.0 * (xn[k] - xp[k]))).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors_at_construction() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 3]).unwrap();
        let b = g.leaf("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        match err {
            NumericsError::Shape { op, .. } => assert_eq!(op, OpKind::MatMul),
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.add(a, b).is_ok());
        let c = g.leaf("c", &[1, 2]).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2]).unwrap();
        let err = g
            .backward(a, &bind(&[("a", Array::zeros(&[2]))]))
            .unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarRoot { .. }));
    }

    #[test]
    fn binding_shape_mismatch_names_leaf() {
        let mut g = Graph::new();
        let a = g.leaf("weights", &[2]).unwrap();
        let err = g.evaluate(a, &bind(&[("weights", Array::zeros(&[3]))])).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn row_broadcast_add_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 2]).unwrap();
        let b = g.leaf("b", &[1, 2]).unwrap();
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        let out = g
            .backward(
                s,
                &bind(&[("x", Array::zeros(&[3, 2])), ("b", Array::zeros(&[1, 2]))]),
            )
            .unwrap();
        assert_eq!(out.grads["b"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn evaluate_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[4, 3]).unwrap();
        let d = g.pairwise_sq_dist(x).unwrap();
        let s = g.softmax(d).unwrap();
        let bnd = bind(&[(
            "x",
            Array::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        )]);
        let a = g.evaluate(s, &bnd).unwrap();
        let b = g.evaluate(s, &bnd).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fault_scales_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]).unwrap();
        let t = g.tanh(x).unwrap();
        let s = g.sum(t).unwrap();
        let bnd = bind(&[("x", Array::vector(vec![0.0, 0.0]).unwrap())]);
        g.set_fault(Some(GradFault {
            kind: OpKind::Tanh,
            factor: 2.0,
        }));
        let out = g.backward(s, &bnd).unwrap();
        assert_eq!(out.grads["x"].data(), &[2.0, 2.0]);
    }
}
