//! Scalar computational graphs.
//!
//! A [`ComputeGraph`] is a topologically ordered list of elementary operations over a fixed
//! set of named scalar inputs, with one designated output node. Graphs are validated on
//! construction: arguments must precede their consumers, every node must feed the output and
//! every input must be used. The naive evaluator in this module evaluates every operation
//! at every point and is the reference the tensor-grid evaluator is checked against.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of model inputs; dependency sets are stored as 64-bit masks.
pub const MAX_INPUTS: usize = 64;

/// Damping used by every `fixed_point_solve` iteration.
pub const FIXED_POINT_DAMPING: f64 = 0.5;
pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-10;
pub const DEFAULT_FIXED_POINT_MAX_ITER: u32 = 100;

/// Points are evaluated in batches of this size when running in parallel.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph document: {0}")]
    Parse(String),
    #[error("node `{node}`: cycle detected")]
    Cycle { node: String },
    #[error("node `{node}`: argument `{arg}` is defined later in the document")]
    OutOfOrder { node: String, arg: String },
    #[error("node `{node}`: unknown operation kind `{kind}`")]
    UnknownKind { node: String, kind: String },
    #[error("node `{node}`: `{kind}` expects {expected} argument(s), got {got}")]
    Arity {
        node: String,
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("node `{node}`: `{kind}` requires a constant")]
    MissingConstant { node: String, kind: String },
    #[error("node `{node}`: reference to undefined identifier `{arg}`")]
    Dangling { node: String, arg: String },
    #[error("node `{node}`: does not contribute to the output")]
    DeadNode { node: String },
    #[error("input `{input}` is never used")]
    UnusedInput { input: String },
    #[error("identifier `{id}` is defined more than once")]
    Duplicate { id: String },
    #[error("node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("output `{0}` is not a node of the graph")]
    BadOutput(String),
    #[error("graph has {0} inputs, at most {MAX_INPUTS} are supported")]
    TooManyInputs(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("point {point}: node `{node}`: {reason}")]
    Domain {
        point: usize,
        node: String,
        reason: &'static str,
    },
    #[error("point {point}: node `{node}`: fixed point did not converge in {max_iter} iterations")]
    NoConvergence {
        point: usize,
        node: String,
        max_iter: u32,
    },
    #[error("points have {got} columns, graph has {expected} inputs")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input value at point {point}")]
    NonFiniteInput { point: usize },
}

/// Bit set over model inputs (or over grid factors).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexSet(pub u64);

impl Serialize for IndexSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl IndexSet {
    pub const EMPTY: IndexSet = IndexSet(0);

    pub fn singleton(i: usize) -> Self {
        IndexSet(1u64 << i)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        IndexSet(it.into_iter().fold(0u64, |acc, i| acc | (1u64 << i)))
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn union(self, other: IndexSet) -> Self {
        IndexSet(self.0 | other.0)
    }

    pub fn intersects(self, other: IndexSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset(self, other: IndexSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..64).filter(move |i| bits >> i & 1 == 1)
    }
}

impl fmt::Debug for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// A reference to a graph input or to an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arg {
    Input(usize),
    Node(usize),
}

/// Inner problem of a `fixed_point_solve` node.
///
/// `body` has the state variable as input 0 followed by one input per outer argument, and
/// computes `G(x, params)`. The solver iterates `x <- (1 - damping) x + damping G(x, params)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSpec {
    pub body: ComputeGraph,
    pub tol: f64,
    pub max_iter: u32,
    pub init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Const(f64),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Cos,
    Sin,
    Exp,
    Log,
    Sqrt,
    Power(f64),
    Scale(f64),
    Offset(f64),
    FixedPoint(Box<FixedPointSpec>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Const(_) => "const",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Cos => "cos",
            OpKind::Sin => "sin",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Power(_) => "power",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::FixedPoint(_) => "fixed_point_solve",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Const(_) => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::FixedPoint(spec) => spec.body.num_inputs() - 1,
            _ => 1,
        }
    }

    fn constant(&self) -> Option<f64> {
        match self {
            OpKind::Const(c) | OpKind::Power(c) | OpKind::Scale(c) | OpKind::Offset(c) => Some(*c),
            _ => None,
        }
    }
}

/// Per-kind default unit costs, in work units per evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub elementary: u64,
    pub fixed_point: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            elementary: 1,
            fixed_point: 50,
        }
    }
}

impl CostTable {
    pub fn cost_of(&self, kind: &OpKind) -> u64 {
        match kind {
            OpKind::FixedPoint(_) => self.fixed_point,
            _ => self.elementary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationNode {
    pub id: String,
    pub kind: OpKind,
    pub args: Vec<Arg>,
    pub unit_cost: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    inputs: Vec<String>,
    nodes: Vec<OperationNode>,
    output: usize,
}

impl ComputeGraph {
    /// Validates and builds a graph. Nodes must already be in topological order.
    pub fn new(
        inputs: Vec<String>,
        nodes: Vec<OperationNode>,
        output: usize,
    ) -> Result<Self, GraphError> {
        if inputs.len() > MAX_INPUTS {
            return Err(GraphError::TooManyInputs(inputs.len()));
        }
        let mut seen = HashSet::new();
        for id in inputs.iter().chain(nodes.iter().map(|n| &n.id)) {
            if !seen.insert(id.as_str()) {
                return Err(GraphError::Duplicate { id: id.clone() });
            }
        }
        if output >= nodes.len() {
            return Err(GraphError::BadOutput(format!("#{output}")));
        }
        for (i, node) in nodes.iter().enumerate() {
            let expected = node.kind.arity();
            if node.args.len() != expected {
                return Err(GraphError::Arity {
                    node: node.id.clone(),
                    kind: node.kind.name().into(),
                    expected,
                    got: node.args.len(),
                });
            }
            for arg in &node.args {
                match *arg {
                    Arg::Input(j) if j >= inputs.len() => {
                        return Err(GraphError::Dangling {
                            node: node.id.clone(),
                            arg: format!("input #{j}"),
                        })
                    }
                    Arg::Node(j) if j == i => {
                        return Err(GraphError::Cycle {
                            node: node.id.clone(),
                        })
                    }
                    Arg::Node(j) if j > i => {
                        return Err(GraphError::OutOfOrder {
                            node: node.id.clone(),
                            arg: nodes
                                .get(j)
                                .map_or_else(|| format!("#{j}"), |n| n.id.clone()),
                        })
                    }
                    _ => {}
                }
            }
            if let OpKind::FixedPoint(spec) = &node.kind {
                if node.unit_cost == 0 {
                    return Err(GraphError::InvalidNode {
                        node: node.id.clone(),
                        reason: "fixed_point_solve must have a positive cost".into(),
                    });
                }
                if spec.tol.is_nan()
                    || spec.tol <= 0.0
                    || spec.max_iter == 0
                    || !spec.init.is_finite()
                {
                    return Err(GraphError::InvalidNode {
                        node: node.id.clone(),
                        reason: "fixed_point_solve needs tol > 0, max_iter > 0, finite init".into(),
                    });
                }
            }
            if let Some(c) = node.kind.constant() {
                if !c.is_finite() {
                    return Err(GraphError::InvalidNode {
                        node: node.id.clone(),
                        reason: "constant is not finite".into(),
                    });
                }
            }
        }

        // backward reachability from the output
        let mut live = vec![false; nodes.len()];
        let mut used_inputs = vec![false; inputs.len()];
        live[output] = true;
        for i in (0..nodes.len()).rev() {
            if !live[i] {
                continue;
            }
            for arg in &nodes[i].args {
                match *arg {
                    Arg::Input(j) => used_inputs[j] = true,
                    Arg::Node(j) => live[j] = true,
                }
            }
        }
        if let Some(i) = live.iter().position(|l| !l) {
            return Err(GraphError::DeadNode {
                node: nodes[i].id.clone(),
            });
        }
        if let Some(j) = used_inputs.iter().position(|u| !u) {
            return Err(GraphError::UnusedInput {
                input: inputs[j].clone(),
            });
        }
        Ok(ComputeGraph {
            inputs,
            nodes,
            output,
        })
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn nodes(&self) -> &[OperationNode] {
        &self.nodes
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|n| n == name)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Sum of unit costs of all operations, i.e. the cost of one model evaluation.
    pub fn total_unit_cost(&self) -> u64 {
        self.nodes.iter().map(|n| n.unit_cost).sum()
    }

    /// Evaluates the graph at a single point. Returns the output and the number of inner
    /// fixed-point iterations performed.
    pub fn eval_point(&self, point: &[f64]) -> Result<(f64, u64), NodeFailure> {
        let (values, inner) = self.eval_nodes(point)?;
        Ok((values[self.output], inner))
    }

    /// Values of every node at a single point, plus inner fixed-point iterations.
    pub fn eval_nodes(&self, point: &[f64]) -> Result<(Vec<f64>, u64), NodeFailure> {
        let mut values = Vec::with_capacity(self.nodes.len());
        let mut inner = 0u64;
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            params.clear();
            params.extend(node.args.iter().map(|a| resolve(*a, point, &values)));
            let v = match &node.kind {
                OpKind::FixedPoint(spec) => {
                    let (x, iters) = solve_fixed_point(spec, &params).map_err(|e| e.at(i))?;
                    inner += iters;
                    x
                }
                kind => apply_elementary(kind, &params).map_err(|r| NodeFailure {
                    node: i,
                    kind: FailureKind::Domain(r),
                })?,
            };
            values.push(v);
        }
        Ok((values, inner))
    }

    pub(crate) fn failure_to_eval_error(&self, f: NodeFailure, point: usize) -> EvalError {
        let node = self.nodes[f.node].id.clone();
        match f.kind {
            FailureKind::Domain(reason) => EvalError::Domain {
                point,
                node,
                reason,
            },
            FailureKind::NoConvergence(max_iter) => EvalError::NoConvergence {
                point,
                node,
                max_iter,
            },
        }
    }
}

fn resolve(a: Arg, point: &[f64], values: &[f64]) -> f64 {
    match a {
        Arg::Input(j) => point[j],
        Arg::Node(j) => values[j],
    }
}

/// A failure at node `node` of some graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFailure {
    pub node: usize,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FailureKind {
    Domain(&'static str),
    NoConvergence(u32),
}

#[derive(Debug)]
pub(crate) struct InnerFailure(FailureKind);

impl InnerFailure {
    fn at(self, node: usize) -> NodeFailure {
        NodeFailure { node, kind: self.0 }
    }

    pub(crate) fn kind(&self) -> FailureKind {
        self.0
    }
}

pub(crate) fn apply_elementary(kind: &OpKind, a: &[f64]) -> Result<f64, &'static str> {
    let v = match kind {
        OpKind::Const(c) => *c,
        OpKind::Add => a[0] + a[1],
        OpKind::Sub => a[0] - a[1],
        OpKind::Mul => a[0] * a[1],
        OpKind::Div => {
            if a[1] == 0.0 {
                return Err("division by zero");
            }
            a[0] / a[1]
        }
        OpKind::Neg => -a[0],
        OpKind::Cos => a[0].cos(),
        OpKind::Sin => a[0].sin(),
        OpKind::Exp => a[0].exp(),
        OpKind::Log => {
            if a[0] <= 0.0 {
                return Err("log of a non-positive value");
            }
            a[0].ln()
        }
        OpKind::Sqrt => {
            if a[0] < 0.0 {
                return Err("sqrt of a negative value");
            }
            a[0].sqrt()
        }
        OpKind::Power(p) => {
            if a[0] == 0.0 && *p < 0.0 {
                return Err("negative power of zero");
            }
            if a[0] < 0.0 && p.fract() != 0.0 {
                return Err("fractional power of a negative value");
            }
            if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
                a[0].powi(*p as i32)
            } else {
                a[0].powf(*p)
            }
        }
        OpKind::Scale(c) => c * a[0],
        OpKind::Offset(c) => a[0] + c,
        OpKind::FixedPoint(_) => unreachable!("composite operation"),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err("non-finite result")
    }
}

/// Damped fixed-point iteration for a composite node. Returns the fixed point and the
/// number of iterations used.
pub(crate) fn solve_fixed_point(
    spec: &FixedPointSpec,
    params: &[f64],
) -> Result<(f64, u64), InnerFailure> {
    let mut point = Vec::with_capacity(params.len() + 1);
    point.push(spec.init);
    point.extend_from_slice(params);
    for iter in 1..=spec.max_iter {
        let x = point[0];
        let (g, _) = spec
            .body
            .eval_point(&point)
            .map_err(|f| InnerFailure(f.kind))?;
        let next = (1.0 - FIXED_POINT_DAMPING) * x + FIXED_POINT_DAMPING * g;
        if !next.is_finite() {
            return Err(InnerFailure(FailureKind::Domain(
                "fixed point iterate is not finite",
            )));
        }
        point[0] = next;
        if (next - x).abs() <= spec.tol * x.abs().max(1.0) {
            return Ok((next, iter as u64));
        }
    }
    Err(InnerFailure(FailureKind::NoConvergence(spec.max_iter)))
}

/// Row-major `n x dim` matrix of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(
            dim == 0 && data.is_empty() || dim > 0 && data.len().is_multiple_of(dim),
            "point data length {} is not a multiple of {dim}",
            data.len()
        );
        PointSet { dim, data }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        PointSet { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-operation evaluation counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct OpCounters {
    pub counts: Vec<u64>,
    /// Total inner fixed-point iterations; reported separately from `counts`.
    pub inner_iterations: u64,
}

impl OpCounters {
    pub fn zeros(num_nodes: usize) -> Self {
        OpCounters {
            counts: vec![0; num_nodes],
            inner_iterations: 0,
        }
    }

    pub fn merge(mut self, other: &OpCounters) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.inner_iterations += other.inner_iterations;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveEvaluation {
    pub outputs: Vec<f64>,
    pub counters: OpCounters,
}

/// Evaluates every operation at every point (the for-loop approach).
pub fn evaluate_naive(g: &ComputeGraph, points: &PointSet) -> Result<NaiveEvaluation, EvalError> {
    if !points.is_empty() && points.dim() != g.num_inputs() {
        return Err(EvalError::DimensionMismatch {
            expected: g.num_inputs(),
            got: points.dim(),
        });
    }
    let n = points.len();
    let batches: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_BATCH)
        .map(|s| (s, (s + EVAL_BATCH).min(n)))
        .collect();
    let results: Vec<Result<(Vec<f64>, u64), EvalError>> = batches
        .par_iter()
        .map(|&(s, e)| {
            let mut out = Vec::with_capacity(e - s);
            let mut inner = 0;
            for i in s..e {
                let p = points.row(i);
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(EvalError::NonFiniteInput { point: i });
                }
                let (v, it) = g.eval_point(p).map_err(|f| g.failure_to_eval_error(f, i))?;
                out.push(v);
                inner += it;
            }
            Ok((out, inner))
        })
        .collect();
    let mut outputs = Vec::with_capacity(n);
    let mut inner_iterations = 0;
    for r in results {
        let (vals, it) = r?;
        outputs.extend(vals);
        inner_iterations += it;
    }
    Ok(NaiveEvaluation {
        outputs,
        counters: OpCounters {
            counts: vec![n as u64; g.nodes().len()],
            inner_iterations,
        },
    })
}

/// Work units spent: sum over operations of count times unit cost.
pub fn counted_cost(counters: &OpCounters, g: &ComputeGraph) -> u64 {
    counters
        .counts
        .iter()
        .zip(g.nodes())
        .map(|(c, n)| c * n.unit_cost)
        .sum()
}

/// Binary operation/input dependency table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyMatrix {
    rows: Vec<IndexSet>,
    num_inputs: usize,
}

impl DependencyMatrix {
    pub fn row(&self, op: usize) -> IndexSet {
        self.rows[op]
    }

    pub fn rows(&self) -> &[IndexSet] {
        &self.rows
    }

    pub fn get(&self, op: usize, input: usize) -> bool {
        self.rows[op].contains(input)
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn to_table(&self) -> Vec<Vec<u8>> {
        self.rows
            .iter()
            .map(|r| (0..self.num_inputs).map(|j| r.contains(j) as u8).collect())
            .collect()
    }
}

/// Transitive input dependencies of every operation. A composite node depends on the union
/// of its arguments' dependencies.
pub fn dependency_matrix(g: &ComputeGraph) -> DependencyMatrix {
    let mut rows: Vec<IndexSet> = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let dep = node.args.iter().fold(IndexSet::EMPTY, |acc, a| match *a {
            Arg::Input(j) => acc.union(IndexSet::singleton(j)),
            Arg::Node(j) => acc.union(rows[j]),
        });
        rows.push(dep);
    }
    DependencyMatrix {
        rows,
        num_inputs: g.num_inputs(),
    }
}

// ---------------------------------------------------------------------------------------
// JSON documents

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub inputs: Vec<String>,
    pub nodes: Vec<NodeDoc>,
    pub output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(rename = "const", default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgraph: Option<SubgraphDoc>,
}

/// Inner graph of a `fixed_point_solve` node. `inputs` bind positionally to the node's
/// `args`; `state` names the iterated variable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SubgraphDoc {
    pub state: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub nodes: Vec<NodeDoc>,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
}

/// Parses and validates a JSON graph document with the default cost table.
pub fn load_graph(document: &str) -> Result<ComputeGraph, GraphError> {
    load_graph_with(document, &CostTable::default())
}

pub fn load_graph_with(document: &str, costs: &CostTable) -> Result<ComputeGraph, GraphError> {
    let doc: GraphDoc =
        serde_json::from_str(document).map_err(|e| GraphError::Parse(e.to_string()))?;
    graph_from_doc(&doc, costs)
}

pub fn graph_from_doc(doc: &GraphDoc, costs: &CostTable) -> Result<ComputeGraph, GraphError> {
    build_from_parts(&doc.inputs, &doc.nodes, &doc.output, costs)
}

fn build_from_parts(
    inputs: &[String],
    node_docs: &[NodeDoc],
    output: &str,
    costs: &CostTable,
) -> Result<ComputeGraph, GraphError> {
    let input_pos: HashMap<&str, usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let node_pos: HashMap<&str, usize> = node_docs
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();

    let mut nodes = Vec::with_capacity(node_docs.len());
    for (i, nd) in node_docs.iter().enumerate() {
        let kind = parse_kind(nd, costs)?;
        let mut args = Vec::with_capacity(nd.args.len());
        for a in &nd.args {
            if let Some(&j) = input_pos.get(a.as_str()) {
                args.push(Arg::Input(j));
            } else if let Some(&j) = node_pos.get(a.as_str()) {
                if j >= i {
                    return Err(if j == i || reaches(node_docs, &node_pos, j, i) {
                        GraphError::Cycle {
                            node: nd.id.clone(),
                        }
                    } else {
                        GraphError::OutOfOrder {
                            node: nd.id.clone(),
                            arg: a.clone(),
                        }
                    });
                }
                args.push(Arg::Node(j));
            } else {
                return Err(GraphError::Dangling {
                    node: nd.id.clone(),
                    arg: a.clone(),
                });
            }
        }
        let unit_cost = nd.cost.unwrap_or_else(|| costs.cost_of(&kind));
        nodes.push(OperationNode {
            id: nd.id.clone(),
            kind,
            args,
            unit_cost,
        });
    }
    let out = *node_pos
        .get(output)
        .ok_or_else(|| GraphError::BadOutput(output.to_string()))?;
    ComputeGraph::new(inputs.to_vec(), nodes, out)
}

/// Whether node `from` depends (through document references) on node `target`.
fn reaches(docs: &[NodeDoc], pos: &HashMap<&str, usize>, from: usize, target: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; docs.len()];
    while let Some(i) = stack.pop() {
        if i == target {
            return true;
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        stack.extend(
            docs[i]
                .args
                .iter()
                .filter_map(|a| pos.get(a.as_str()).copied()),
        );
    }
    false
}

fn parse_kind(nd: &NodeDoc, costs: &CostTable) -> Result<OpKind, GraphError> {
    let need_const = || {
        nd.constant.ok_or_else(|| GraphError::MissingConstant {
            node: nd.id.clone(),
            kind: nd.kind.clone(),
        })
    };
    let kind =
        match nd.kind.as_str() {
            "const" => OpKind::Const(need_const()?),
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "neg" => OpKind::Neg,
            "cos" => OpKind::Cos,
            "sin" => OpKind::Sin,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sqrt" => OpKind::Sqrt,
            "power" => OpKind::Power(need_const()?),
            "scale" => OpKind::Scale(need_const()?),
            "offset" => OpKind::Offset(need_const()?),
            "fixed_point_solve" => {
                let sub = nd
                    .subgraph
                    .as_ref()
                    .ok_or_else(|| GraphError::InvalidNode {
                        node: nd.id.clone(),
                        reason: "fixed_point_solve requires a `subgraph`".into(),
                    })?;
                let mut inner_inputs = Vec::with_capacity(sub.inputs.len() + 1);
                inner_inputs.push(sub.state.clone());
                inner_inputs.extend(sub.inputs.iter().cloned());
                let body = build_from_parts(&inner_inputs, &sub.nodes, &sub.output, costs)
                    .map_err(|e| GraphError::InvalidNode {
                        node: nd.id.clone(),
                        reason: format!("subgraph: {e}"),
                    })?;
                OpKind::FixedPoint(Box::new(FixedPointSpec {
                    body,
                    tol: sub.tol.unwrap_or(DEFAULT_FIXED_POINT_TOL),
                    max_iter: sub.max_iter.unwrap_or(DEFAULT_FIXED_POINT_MAX_ITER),
                    init: sub.init.unwrap_or(0.0),
                }))
            }
            other => {
                return Err(GraphError::UnknownKind {
                    node: nd.id.clone(),
                    kind: other.to_string(),
                })
            }
        };
    if nd.subgraph.is_some() && !matches!(kind, OpKind::FixedPoint(_)) {
        return Err(GraphError::InvalidNode {
            node: nd.id.clone(),
            reason: "`subgraph` is only valid on fixed_point_solve".into(),
        });
    }
    Ok(kind)
}

impl ComputeGraph {
    /// Converts back to the JSON document form. Costs are always written explicitly.
    pub fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            inputs: self.inputs.clone(),
            nodes: self.node_docs(),
            output: self.nodes[self.output].id.clone(),
        }
    }

    fn node_docs(&self) -> Vec<NodeDoc> {
        self.nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id.clone(),
                kind: n.kind.name().to_string(),
                args: n
                    .args
                    .iter()
                    .map(|a| match *a {
                        Arg::Input(j) => self.inputs[j].clone(),
                        Arg::Node(j) => self.nodes[j].id.clone(),
                    })
                    .collect(),
                constant: n.kind.constant(),
                cost: Some(n.unit_cost),
                subgraph: match &n.kind {
                    OpKind::FixedPoint(spec) => Some(SubgraphDoc {
                        state: spec.body.inputs[0].clone(),
                        inputs: spec.body.inputs[1..].to_vec(),
                        nodes: spec.body.node_docs(),
                        output: spec.body.nodes[spec.body.output].id.clone(),
                        tol: Some(spec.tol),
                        max_iter: Some(spec.max_iter),
                        init: Some(spec.init),
                    }),
                    _ => None,
                },
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph documents always serialize")
    }
}

/// Incremental construction of graphs from Rust code.
///
/// ```
/// use partquad::graph::{GraphBuilder, OpKind};
/// let mut b = GraphBuilder::new(&["u1", "u2"]);
/// let (u1, u2) = (b.input(0), b.input(1));
/// let c = b.op("xi1", OpKind::Cos, &[u1]);
/// let e = b.op("xi2", OpKind::Neg, &[u2]);
/// let e = b.op("xi3", OpKind::Exp, &[e]);
/// let f = b.op("f", OpKind::Add, &[c, e]);
/// let g = b.finish(f).unwrap();
/// assert_eq!(g.eval_point(&[0.0, 0.0]).unwrap().0, 2.0);
/// ```
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    inputs: Vec<String>,
    nodes: Vec<OperationNode>,
    costs: CostTable,
}

impl GraphBuilder {
    pub fn new(inputs: &[&str]) -> Self {
        GraphBuilder {
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            nodes: Vec::new(),
            costs: CostTable::default(),
        }
    }

    pub fn input(&self, j: usize) -> Arg {
        assert!(j < self.inputs.len(), "input {j} out of range");
        Arg::Input(j)
    }

    pub fn op(&mut self, id: &str, kind: OpKind, args: &[Arg]) -> Arg {
        let cost = self.costs.cost_of(&kind);
        self.op_with_cost(id, kind, args, cost)
    }

    pub fn op_with_cost(&mut self, id: &str, kind: OpKind, args: &[Arg], cost: u64) -> Arg {
        self.nodes.push(OperationNode {
            id: id.to_string(),
            kind,
            args: args.to_vec(),
            unit_cost: cost,
        });
        Arg::Node(self.nodes.len() - 1)
    }

    pub fn finish(self, output: Arg) -> Result<ComputeGraph, GraphError> {
        match output {
            Arg::Node(i) => ComputeGraph::new(self.inputs, self.nodes, i),
            Arg::Input(j) => Err(GraphError::BadOutput(self.inputs[j].clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"{
        "inputs": ["u1", "u2"],
        "nodes": [
            {"id": "xi1", "kind": "cos", "args": ["u1"]},
            {"id": "xi2", "kind": "neg", "args": ["u2"]},
            {"id": "xi3", "kind": "exp", "args": ["xi2"]},
            {"id": "f", "kind": "add", "args": ["xi1", "xi3"]}
        ],
        "output": "f"
    }"#;

    fn full_grid_3x3() -> PointSet {
        let xs = [-1.0, 0.0, 1.5];
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .flat_map(|&a| xs.iter().map(move |&b| vec![a, b]))
            .collect();
        PointSet::from_rows(2, &rows)
    }

    #[test]
    fn loads_toy_graph() {
        let g = load_graph(TOY).unwrap();
        assert_eq!(g.nodes().len(), 4);
        assert_eq!(g.nodes()[g.output()].id, "f");
        assert_eq!(g.eval_point(&[0.0, 0.0]).unwrap().0, 2.0);
    }

    #[test]
    fn identity_graph() {
        let doc = r#"{"inputs":["u1"],"nodes":[{"id":"f","kind":"scale","args":["u1"],"const":1.0}],"output":"f"}"#;
        let g = load_graph(doc).unwrap();
        assert_eq!(g.nodes().len(), 1);
        assert_eq!(g.eval_point(&[3.25]).unwrap().0, 3.25);
    }

    #[test]
    fn self_reference_is_a_cycle() {
        let doc =
            r#"{"inputs":["u1"],"nodes":[{"id":"f","kind":"add","args":["u1","f"]}],"output":"f"}"#;
        assert!(matches!(load_graph(doc), Err(GraphError::Cycle { node }) if node == "f"));
    }

    #[test]
    fn two_node_cycle() {
        let doc = r#"{"inputs":["u"],"nodes":[
            {"id":"a","kind":"add","args":["u","b"]},
            {"id":"b","kind":"exp","args":["a"]}],"output":"b"}"#;
        assert!(matches!(load_graph(doc), Err(GraphError::Cycle { node }) if node == "a"));
    }

    #[test]
    fn forward_reference_without_cycle() {
        let doc = r#"{"inputs":["u"],"nodes":[
            {"id":"a","kind":"exp","args":["b"]},
            {"id":"b","kind":"cos","args":["u"]}],"output":"a"}"#;
        assert!(matches!(
            load_graph(doc),
            Err(GraphError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn load_errors_name_the_node() {
        let unknown =
            r#"{"inputs":["u"],"nodes":[{"id":"a","kind":"tanh","args":["u"]}],"output":"a"}"#;
        assert!(
            matches!(load_graph(unknown), Err(GraphError::UnknownKind { node, .. }) if node == "a")
        );

        let arity =
            r#"{"inputs":["u"],"nodes":[{"id":"a","kind":"add","args":["u"]}],"output":"a"}"#;
        assert!(
            matches!(load_graph(arity), Err(GraphError::Arity { node, expected: 2, got: 1, .. }) if node == "a")
        );

        let dangling =
            r#"{"inputs":["u"],"nodes":[{"id":"a","kind":"cos","args":["w"]}],"output":"a"}"#;
        assert!(
            matches!(load_graph(dangling), Err(GraphError::Dangling { node, .. }) if node == "a")
        );

        let dead = r#"{"inputs":["u"],"nodes":[
            {"id":"a","kind":"cos","args":["u"]},
            {"id":"b","kind":"sin","args":["u"]}],"output":"b"}"#;
        assert!(matches!(load_graph(dead), Err(GraphError::DeadNode { node }) if node == "a"));

        let unused =
            r#"{"inputs":["u","v"],"nodes":[{"id":"a","kind":"cos","args":["u"]}],"output":"a"}"#;
        assert!(
            matches!(load_graph(unused), Err(GraphError::UnusedInput { input }) if input == "v")
        );

        let no_const =
            r#"{"inputs":["u"],"nodes":[{"id":"a","kind":"power","args":["u"]}],"output":"a"}"#;
        assert!(matches!(
            load_graph(no_const),
            Err(GraphError::MissingConstant { .. })
        ));
    }

    #[test]
    fn toy_dependency_matrix_matches_table() {
        let g = load_graph(TOY).unwrap();
        let dm = dependency_matrix(&g);
        assert_eq!(
            dm.to_table(),
            vec![vec![1, 0], vec![0, 1], vec![0, 1], vec![1, 1]]
        );
    }

    #[test]
    fn all_dependent_graph_has_all_ones() {
        let doc = r#"{"inputs":["a","b"],"nodes":[
            {"id":"m","kind":"mul","args":["a","b"]},
            {"id":"e","kind":"exp","args":["m"]},
            {"id":"f","kind":"add","args":["e","m"]}],"output":"f"}"#;
        let dm = dependency_matrix(&load_graph(doc).unwrap());
        assert!(dm.to_table().iter().flatten().all(|&x| x == 1));
    }

    #[test]
    fn naive_counts_every_operation_at_every_point() {
        let g = load_graph(TOY).unwrap();
        let ev = evaluate_naive(&g, &full_grid_3x3()).unwrap();
        assert_eq!(ev.counters.counts, vec![9; 4]);
        assert_eq!(counted_cost(&ev.counters, &g), 36);
        for (p, v) in full_grid_3x3().rows().zip(&ev.outputs) {
            assert_eq!(*v, p[0].cos() + (-p[1]).exp());
        }
    }

    #[test]
    fn naive_with_no_points() {
        let g = load_graph(TOY).unwrap();
        let ev = evaluate_naive(&g, &PointSet::new(2, vec![])).unwrap();
        assert!(ev.outputs.is_empty());
        assert_eq!(ev.counters.counts, vec![0; 4]);
        assert_eq!(counted_cost(&ev.counters, &g), 0);
    }

    #[test]
    fn counted_cost_single_op() {
        let doc = r#"{"inputs":["u"],"nodes":[{"id":"a","kind":"cos","args":["u"],"cost":5}],"output":"a"}"#;
        let g = load_graph(doc).unwrap();
        let pts = PointSet::new(1, (0..7).map(|i| i as f64).collect());
        let ev = evaluate_naive(&g, &pts).unwrap();
        assert_eq!(counted_cost(&ev.counters, &g), 35);
    }

    #[test]
    fn domain_errors_carry_point_index() {
        let doc = r#"{"inputs":["u"],"nodes":[{"id":"l","kind":"log","args":["u"]}],"output":"l"}"#;
        let g = load_graph(doc).unwrap();
        let pts = PointSet::new(1, vec![1.0, 2.0, -1.0]);
        assert!(matches!(
            evaluate_naive(&g, &pts),
            Err(EvalError::Domain { point: 2, ref node, .. }) if node == "l"
        ));
        let doc =
            r#"{"inputs":["u"],"nodes":[{"id":"d","kind":"div","args":["u","u"]}],"output":"d"}"#;
        let g = load_graph(doc).unwrap();
        assert!(matches!(
            evaluate_naive(&g, &PointSet::new(1, vec![0.0])),
            Err(EvalError::Domain { point: 0, .. })
        ));
    }

    const FIXED_POINT: &str = r#"{
        "inputs": ["a"],
        "nodes": [
            {"id": "F", "kind": "fixed_point_solve", "args": ["a"], "subgraph": {
                "state": "x", "inputs": ["p"],
                "nodes": [
                    {"id": "c", "kind": "cos", "args": ["x"]},
                    {"id": "h", "kind": "scale", "args": ["c"], "const": 0.5},
                    {"id": "g", "kind": "add", "args": ["h", "p"]}
                ],
                "output": "g", "tol": 1e-13, "max_iter": 200
            }},
            {"id": "f", "kind": "scale", "args": ["F"], "const": 2.0}
        ],
        "output": "f"
    }"#;

    #[test]
    fn fixed_point_solve_counts_once_per_point() {
        let g = load_graph(FIXED_POINT).unwrap();
        assert_eq!(g.nodes()[0].unit_cost, 50);
        let pts = PointSet::new(1, vec![0.0, 0.3, 1.0]);
        let ev = evaluate_naive(&g, &pts).unwrap();
        assert_eq!(ev.counters.counts, vec![3, 3]);
        assert!(ev.counters.inner_iterations > 3);
        for (a, f) in [0.0, 0.3, 1.0].iter().zip(&ev.outputs) {
            let x = f / 2.0;
            assert!((x - 0.5 * x.cos() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_reports_nonconvergence() {
        // x = 3x + a has no attracting fixed point under damping 0.5
        let doc = r#"{"inputs":["a"],"nodes":[
            {"id":"F","kind":"fixed_point_solve","args":["a"],"subgraph":{
                "state":"x","inputs":["p"],
                "nodes":[{"id":"s","kind":"scale","args":["x"],"const":3.0},
                         {"id":"g","kind":"add","args":["s","p"]}],
                "output":"g","max_iter":20}}],"output":"F"}"#;
        let g = load_graph(doc).unwrap();
        let r = evaluate_naive(&g, &PointSet::new(1, vec![1.0]));
        assert!(matches!(
            r,
            Err(EvalError::NoConvergence { max_iter: 20, .. })
        ));
    }

    #[test]
    fn fixed_point_dependency_is_union_of_arguments() {
        let doc = r#"{"inputs":["a","b","c"],"nodes":[
            {"id":"F","kind":"fixed_point_solve","args":["a","b"],"subgraph":{
                "state":"x","inputs":["p","q"],
                "nodes":[{"id":"m","kind":"mul","args":["x","p"]},
                         {"id":"s","kind":"scale","args":["m"],"const":0.1},
                         {"id":"g","kind":"add","args":["s","q"]}],
                "output":"g"}},
            {"id":"f","kind":"mul","args":["F","c"]}],"output":"f"}"#;
        let dm = dependency_matrix(&load_graph(doc).unwrap());
        assert_eq!(dm.to_table(), vec![vec![1, 1, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn fixed_point_requires_positive_cost() {
        let doc = FIXED_POINT.replace(
            r#""args": ["a"], "subgraph""#,
            r#""args": ["a"], "cost": 0, "subgraph""#,
        );
        assert!(matches!(
            load_graph(&doc),
            Err(GraphError::InvalidNode { .. })
        ));
    }

    #[test]
    fn document_round_trip() {
        let g = load_graph(FIXED_POINT).unwrap();
        let again = load_graph(&g.to_json()).unwrap();
        assert_eq!(g, again);
    }
}
