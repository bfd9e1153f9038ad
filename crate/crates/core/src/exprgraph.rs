//! Arena-backed scalar expression graph with forward evaluation and
//! reverse-mode first derivatives.
//!
//! Nodes are appended in topological order: every operand of a node lives at
//! a smaller arena index, so a single left-to-right sweep evaluates the whole
//! graph and a right-to-left sweep propagates adjoints. Structurally identical
//! nodes are shared (hash-consing), which keeps repeated kinematic
//! subexpressions such as `sin(q_j)` from being duplicated.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Handle to a node in an [`ExpressionGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExprRef(u32);

impl ExprRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ExprRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operation selector for [`ExpressionGraph::build`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Const(f64),
    Var(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Sqrt,
    Square,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Const(_) | Op::Var(_) => 0,
            Op::Neg | Op::Sin | Op::Cos | Op::Sqrt | Op::Square => 1,
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Var(_) => "var",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
        }
    }
}

/// A node record. Operands are stored inline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Add(ExprRef, ExprRef),
    Sub(ExprRef, ExprRef),
    Mul(ExprRef, ExprRef),
    Div(ExprRef, ExprRef),
    Neg(ExprRef),
    Sin(ExprRef),
    Cos(ExprRef),
    Sqrt(ExprRef),
    Square(ExprRef),
}

impl Node {
    pub fn op(&self) -> Op {
        match *self {
            Node::Const(c) => Op::Const(c),
            Node::Var(i) => Op::Var(i),
            Node::Add(..) => Op::Add,
            Node::Sub(..) => Op::Sub,
            Node::Mul(..) => Op::Mul,
            Node::Div(..) => Op::Div,
            Node::Neg(_) => Op::Neg,
            Node::Sin(_) => Op::Sin,
            Node::Cos(_) => Op::Cos,
            Node::Sqrt(_) => Op::Sqrt,
            Node::Square(_) => Op::Square,
        }
    }

    /// Operands in order; unused slots are `None`.
    pub fn operands(&self) -> [Option<ExprRef>; 2] {
        match *self {
            Node::Const(_) | Node::Var(_) => [None, None],
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                [Some(a), Some(b)]
            }
            Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Sqrt(a) | Node::Square(a) => {
                [Some(a), None]
            }
        }
    }

    fn key(&self) -> NodeKey {
        let [a, b] = self.operands();
        let payload = match *self {
            Node::Const(c) => c.to_bits(),
            Node::Var(i) => i as u64,
            _ => 0,
        };
        let tag = match *self {
            Node::Const(_) => 0,
            Node::Var(_) => 1,
            Node::Add(..) => 2,
            Node::Sub(..) => 3,
            Node::Mul(..) => 4,
            Node::Div(..) => 5,
            Node::Neg(_) => 6,
            Node::Sin(_) => 7,
            Node::Cos(_) => 8,
            Node::Sqrt(_) => 9,
            Node::Square(_) => 10,
        };
        NodeKey {
            tag,
            payload,
            a: a.map_or(u32::MAX, |r| r.0),
            b: b.map_or(u32::MAX, |r| r.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct NodeKey {
    tag: u8,
    payload: u64,
    a: u32,
    b: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("operator `{op}` takes {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("operand {0} does not belong to this graph")]
    InvalidRef(ExprRef),
    #[error("variable {index} does not exist (graph has {count})")]
    UnknownVariable { index: usize, count: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("expected {expected} variable values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("root {0} does not belong to this graph")]
    InvalidRoot(ExprRef),
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("square root of negative value {value} at node {node}")]
    NegativeSqrt { node: usize, value: f64 },
    #[error("square root is not differentiable at zero (node {node})")]
    SqrtAtZero { node: usize },
}

/// Append-only DAG of scalar expressions.
#[derive(Clone, Debug, Default)]
pub struct ExpressionGraph {
    nodes: Vec<Node>,
    variable_count: usize,
    vars: Vec<ExprRef>,
    interned: HashMap<NodeKey, ExprRef>,
}

impl ExpressionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn variable_count(&self) -> usize {
        self.variable_count
    }

    pub fn node(&self, r: ExprRef) -> &Node {
        &self.nodes[r.index()]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Returns the `Var` node for variable `index`, if it exists.
    pub fn var(&self, index: usize) -> Option<ExprRef> {
        self.vars.get(index).copied()
    }

    /// Appends a fresh decision variable numbered `variable_count`.
    pub fn new_variable(&mut self) -> ExprRef {
        let index = self.variable_count;
        self.variable_count += 1;
        let r = self.push(Node::Var(index));
        self.vars.push(r);
        r
    }

    /// Builds `op` over `operands`, returning an existing node when an
    /// identical one is already in the arena.
    pub fn build(&mut self, op: Op, operands: &[ExprRef]) -> Result<ExprRef, GraphError> {
        if operands.len() != op.arity() {
            return Err(GraphError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: operands.len(),
            });
        }
        if let Some(&bad) = operands.iter().find(|r| r.index() >= self.nodes.len()) {
            return Err(GraphError::InvalidRef(bad));
        }
        let a = operands.first().copied();
        let b = operands.get(1).copied();
        let node = match op {
            Op::Const(c) => Node::Const(c),
            Op::Var(index) => {
                return self.var(index).ok_or(GraphError::UnknownVariable {
                    index,
                    count: self.variable_count,
                })
            }
            Op::Add => Node::Add(a.unwrap(), b.unwrap()),
            Op::Sub => Node::Sub(a.unwrap(), b.unwrap()),
            Op::Mul => Node::Mul(a.unwrap(), b.unwrap()),
            Op::Div => Node::Div(a.unwrap(), b.unwrap()),
            Op::Neg => Node::Neg(a.unwrap()),
            Op::Sin => Node::Sin(a.unwrap()),
            Op::Cos => Node::Cos(a.unwrap()),
            Op::Sqrt => Node::Sqrt(a.unwrap()),
            Op::Square => Node::Square(a.unwrap()),
        };
        Ok(self.intern(node))
    }

    fn push(&mut self, node: Node) -> ExprRef {
        let r = ExprRef(u32::try_from(self.nodes.len()).expect("expression arena overflow"));
        self.nodes.push(node);
        r
    }

    fn intern(&mut self, node: Node) -> ExprRef {
        debug_assert!(node
            .operands()
            .iter()
            .flatten()
            .all(|r| r.index() < self.nodes.len()));
        let key = node.key();
        if let Some(&r) = self.interned.get(&key) {
            return r;
        }
        let r = self.push(node);
        self.interned.insert(key, r);
        r
    }

    pub fn constant(&mut self, value: f64) -> ExprRef {
        self.intern(Node::Const(value))
    }

    pub fn add(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Node::Add(a, b))
    }

    pub fn sub(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Node::Sub(a, b))
    }

    pub fn mul(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Node::Mul(a, b))
    }

    pub fn div(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Node::Div(a, b))
    }

    pub fn neg(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Node::Neg(a))
    }

    pub fn sin(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Node::Sin(a))
    }

    pub fn cos(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Node::Cos(a))
    }

    pub fn sqrt(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Node::Sqrt(a))
    }

    pub fn square(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Node::Square(a))
    }

    /// `c * a`
    pub fn scale(&mut self, c: f64, a: ExprRef) -> ExprRef {
        let k = self.constant(c);
        self.mul(k, a)
    }

    /// Left-folded sum; the empty sum is the constant zero.
    pub fn sum(&mut self, terms: &[ExprRef]) -> ExprRef {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn dot(&mut self, a: &[ExprRef], b: &[ExprRef]) -> ExprRef {
        assert_eq!(a.len(), b.len(), "dot product of mismatched lengths");
        let terms: Vec<_> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&terms)
    }

    fn check_roots(&self, roots: &[ExprRef]) -> Result<(), EvalError> {
        match roots.iter().find(|r| r.index() >= self.nodes.len()) {
            Some(&r) => Err(EvalError::InvalidRoot(r)),
            None => Ok(()),
        }
    }

    fn check_values(&self, values: &[f64]) -> Result<(), EvalError> {
        if values.len() != self.variable_count {
            return Err(EvalError::Dimension {
                expected: self.variable_count,
                got: values.len(),
            });
        }
        Ok(())
    }

    /// Forward sweep over the arena prefix `0..end`, writing node values
    /// into `out` (resized to `end`).
    pub(crate) fn forward(
        &self,
        end: usize,
        values: &[f64],
        out: &mut Vec<f64>,
    ) -> Result<(), EvalError> {
        out.clear();
        out.reserve(end);
        for (i, node) in self.nodes[..end].iter().enumerate() {
            let v = eval_node(node, i, values, out)?;
            out.push(v);
        }
        Ok(())
    }

    /// Value of each root at `values`.
    pub fn evaluate(&self, roots: &[ExprRef], values: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check_values(values)?;
        self.check_roots(roots)?;
        let end = roots.iter().map(|r| r.index() + 1).max().unwrap_or(0);
        let mut node_values = Vec::new();
        self.forward(end, values, &mut node_values)?;
        Ok(roots.iter().map(|r| node_values[r.index()]).collect())
    }

    /// Dense Jacobian of `roots` with respect to every variable, computed
    /// with one reverse sweep per root.
    pub fn jacobian(&self, roots: &[ExprRef], values: &[f64]) -> Result<DenseMatrix, EvalError> {
        self.check_values(values)?;
        self.check_roots(roots)?;
        let end = roots.iter().map(|r| r.index() + 1).max().unwrap_or(0);
        let mut node_values = Vec::new();
        self.forward(end, values, &mut node_values)?;
        let mut jac = DenseMatrix::zeros(roots.len(), self.variable_count);
        let mut adjoint = vec![0.0; end];
        for (row, root) in roots.iter().enumerate() {
            adjoint[..=root.index()].fill(0.0);
            adjoint[root.index()] = 1.0;
            for i in (0..=root.index()).rev() {
                let bar = adjoint[i];
                if bar == 0.0 {
                    continue;
                }
                if let Node::Var(v) = self.nodes[i] {
                    jac[(row, v)] += bar;
                    continue;
                }
                propagate(&self.nodes[i], i, bar, &node_values, &mut adjoint)?;
            }
        }
        Ok(jac)
    }
}

#[inline]
fn eval_node(node: &Node, i: usize, values: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    Ok(match *node {
        Node::Const(c) => c,
        Node::Var(k) => values[k],
        Node::Add(a, b) => v[a.index()] + v[b.index()],
        Node::Sub(a, b) => v[a.index()] - v[b.index()],
        Node::Mul(a, b) => v[a.index()] * v[b.index()],
        Node::Div(a, b) => {
            let d = v[b.index()];
            if d == 0.0 {
                return Err(EvalError::DivisionByZero { node: i });
            }
            v[a.index()] / d
        }
        Node::Neg(a) => -v[a.index()],
        Node::Sin(a) => v[a.index()].sin(),
        Node::Cos(a) => v[a.index()].cos(),
        Node::Sqrt(a) => {
            let x = v[a.index()];
            if x < 0.0 {
                return Err(EvalError::NegativeSqrt { node: i, value: x });
            }
            x.sqrt()
        }
        Node::Square(a) => {
            let x = v[a.index()];
            x * x
        }
    })
}

/// Pushes `bar` (the adjoint of node `i`) into the adjoints of its operands.
#[inline]
fn propagate(
    node: &Node,
    i: usize,
    bar: f64,
    v: &[f64],
    adjoint: &mut [f64],
) -> Result<(), EvalError> {
    match *node {
        Node::Const(_) | Node::Var(_) => {}
        Node::Add(a, b) => {
            adjoint[a.index()] += bar;
            adjoint[b.index()] += bar;
        }
        Node::Sub(a, b) => {
            adjoint[a.index()] += bar;
            adjoint[b.index()] -= bar;
        }
        Node::Mul(a, b) => {
            adjoint[a.index()] += bar * v[b.index()];
            adjoint[b.index()] += bar * v[a.index()];
        }
        Node::Div(a, b) => {
            let d = v[b.index()];
            adjoint[a.index()] += bar / d;
            adjoint[b.index()] -= bar * v[i] / d;
        }
        Node::Neg(a) => adjoint[a.index()] -= bar,
        Node::Sin(a) => adjoint[a.index()] += bar * v[a.index()].cos(),
        Node::Cos(a) => adjoint[a.index()] -= bar * v[a.index()].sin(),
        Node::Sqrt(a) => {
            if v[i] == 0.0 {
                return Err(EvalError::SqrtAtZero { node: i });
            }
            adjoint[a.index()] += bar * 0.5 / v[i];
        }
        Node::Square(a) => adjoint[a.index()] += 2.0 * bar * v[a.index()],
    }
    Ok(())
}

/// Row-major dense matrix returned by [`ExpressionGraph::jacobian`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.ncols..(r + 1) * self.ncols]
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(r < self.nrows && c < self.ncols);
        &self.data[r * self.ncols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        assert!(r < self.nrows && c < self.ncols);
        &mut self.data[r * self.ncols + c]
    }
}

/// A fixed set of roots prepared for repeated sparse evaluation.
///
/// For every root the reachable sub-DAG and the variables it depends on are
/// recorded once, so gradients cost time proportional to the root's own
/// subgraph rather than the whole arena.
#[derive(Clone, Debug)]
pub struct Tape {
    roots: Vec<ExprRef>,
    end: usize,
    /// Reachable node indices per root, ascending.
    reach: Vec<Vec<u32>>,
    /// Variable indices per root, ascending.
    support: Vec<Vec<usize>>,
}

/// Scratch buffers for [`Tape`] sweeps; one per thread.
#[derive(Clone, Debug, Default)]
pub struct TapeWorkspace {
    values: Vec<f64>,
    adjoint: Vec<f64>,
    slot: Vec<usize>,
}

impl Tape {
    pub fn new(graph: &ExpressionGraph, roots: &[ExprRef]) -> Result<Self, EvalError> {
        graph.check_roots(roots)?;
        let end = roots.iter().map(|r| r.index() + 1).max().unwrap_or(0);
        let mut mark = vec![u32::MAX; end];
        let mut reach = Vec::with_capacity(roots.len());
        let mut support = Vec::with_capacity(roots.len());
        let mut stack = Vec::new();
        for (k, root) in roots.iter().enumerate() {
            let stamp = k as u32;
            let mut nodes = Vec::new();
            let mut vars = Vec::new();
            stack.push(root.index());
            mark[root.index()] = stamp;
            while let Some(i) = stack.pop() {
                nodes.push(i as u32);
                let node = &graph.nodes[i];
                if let Node::Var(v) = *node {
                    vars.push(v);
                }
                for op in node.operands().into_iter().flatten() {
                    if mark[op.index()] != stamp {
                        mark[op.index()] = stamp;
                        stack.push(op.index());
                    }
                }
            }
            nodes.sort_unstable();
            vars.sort_unstable();
            reach.push(nodes);
            support.push(vars);
        }
        Ok(Self {
            roots: roots.to_vec(),
            end,
            reach,
            support,
        })
    }

    pub fn roots(&self) -> &[ExprRef] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// Variables root `k` depends on, ascending.
    pub fn support(&self, k: usize) -> &[usize] {
        &self.support[k]
    }

    /// Evaluates all roots into `out`.
    pub fn evaluate(
        &self,
        graph: &ExpressionGraph,
        values: &[f64],
        ws: &mut TapeWorkspace,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        graph.check_values(values)?;
        graph.forward(self.end, values, &mut ws.values)?;
        for (o, r) in out.iter_mut().zip(&self.roots) {
            *o = ws.values[r.index()];
        }
        Ok(())
    }

    /// Evaluates all roots into `out` and writes the gradient of root `k`
    /// (restricted to `support(k)`) into `grads[k]`.
    pub fn gradients(
        &self,
        graph: &ExpressionGraph,
        values: &[f64],
        ws: &mut TapeWorkspace,
        out: &mut [f64],
        grads: &mut [Vec<f64>],
    ) -> Result<(), EvalError> {
        self.evaluate(graph, values, ws, out)?;
        ws.adjoint.clear();
        ws.adjoint.resize(self.end, 0.0);
        ws.slot.resize(graph.variable_count(), usize::MAX);
        for k in 0..self.roots.len() {
            let support = &self.support[k];
            for (j, &v) in support.iter().enumerate() {
                ws.slot[v] = j;
            }
            let g = &mut grads[k];
            g.clear();
            g.resize(support.len(), 0.0);
            ws.adjoint[self.roots[k].index()] = 1.0;
            for &i in self.reach[k].iter().rev() {
                let i = i as usize;
                let bar = std::mem::replace(&mut ws.adjoint[i], 0.0);
                if bar == 0.0 {
                    continue;
                }
                let node = &graph.nodes[i];
                if let Node::Var(v) = *node {
                    g[ws.slot[v]] += bar;
                } else {
                    propagate(node, i, bar, &ws.values, &mut ws.adjoint)?;
                }
            }
        }
        Ok(())
    }
}
