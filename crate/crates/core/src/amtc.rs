//! Tensor-grid evaluation by dependency signature.
//!
//! Each operation is assigned the set of grid factors its dependency set intersects and is
//! evaluated once per point of the product of those factors only. Values are stored as dense
//! row-major blocks over the operation's factor axes (lowest factor slowest). Where an
//! argument lives on fewer axes than its consumer, an expansion node broadcasts it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{
    apply_elementary, counted_cost, dependency_matrix, solve_fixed_point, Arg, ComputeGraph,
    FailureKind, IndexSet, OpCounters, OpKind, PointSet,
};
use crate::partition::Partition;
use crate::quadrature::QuadratureRule;

const CHUNK: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmtcError {
    #[error("partition covers {partition} inputs but the graph has {graph}")]
    PartitionMismatch { partition: usize, graph: usize },
    #[error("grid factor {factor} has {got} columns, expected {expected}")]
    BlockShape {
        factor: usize,
        expected: usize,
        got: usize,
    },
    #[error("grid has {got} factors, plan has {expected}")]
    FactorCount { expected: usize, got: usize },
    #[error("grid partition does not match the transformed graph")]
    GridMismatch,
    #[error("domain error at node `{node}`, grid index {index:?}: {reason}")]
    Domain {
        node: String,
        index: Vec<(usize, usize)>,
        reason: &'static str,
    },
    #[error(
        "fixed point `{node}` did not converge in {max_iter} iterations at grid index {index:?}"
    )]
    NoConvergence {
        node: String,
        index: Vec<(usize, usize)>,
        max_iter: u32,
    },
    #[error("non-finite grid coordinate in factor {factor}")]
    NonFiniteInput { factor: usize },
}

/// Factor point blocks over a partition of the inputs, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrid {
    partition: Partition,
    blocks: Vec<PointSet>,
}

impl FactorGrid {
    pub fn new(partition: Partition, blocks: Vec<PointSet>) -> Result<Self, AmtcError> {
        if blocks.len() != partition.num_blocks() {
            return Err(AmtcError::FactorCount {
                expected: partition.num_blocks(),
                got: blocks.len(),
            });
        }
        for (m, (b, s)) in blocks.iter().zip(partition.blocks()).enumerate() {
            if b.dim() != s.len() {
                return Err(AmtcError::BlockShape {
                    factor: m,
                    expected: s.len(),
                    got: b.dim(),
                });
            }
            if b.data().iter().any(|v| !v.is_finite()) {
                return Err(AmtcError::NonFiniteInput { factor: m });
            }
        }
        Ok(FactorGrid { partition, blocks })
    }

    /// Factor blocks of a composed rule (physical units).
    pub fn from_rule(rule: &QuadratureRule) -> Self {
        FactorGrid {
            partition: rule.structure().clone(),
            blocks: rule.physical_factor_blocks(),
        }
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn blocks(&self) -> &[PointSet] {
        &self.blocks
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    pub fn total_points(&self) -> usize {
        self.sizes().iter().product()
    }

    /// The full cartesian product in canonical order.
    pub fn expand(&self) -> PointSet {
        let d = self.partition.dim();
        let sizes = self.sizes();
        let total = self.total_points();
        let mut data = vec![0.0; total * d];
        let mut idx = vec![0usize; sizes.len()];
        for row in 0..total {
            for (m, block) in self.partition.blocks().iter().enumerate() {
                let src = self.blocks[m].row(idx[m]);
                for (c, &input) in block.iter().enumerate() {
                    data[row * d + input] = src[c];
                }
            }
            for m in (0..sizes.len()).rev() {
                idx[m] += 1;
                if idx[m] < sizes[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        PointSet::new(d, data)
    }
}

/// Broadcast joint in front of argument `arg` of node `consumer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpansionNode {
    pub consumer: usize,
    pub arg: usize,
    pub from: IndexSet,
    pub to: IndexSet,
}

/// A graph annotated with per-operation factor axes and expansion joints.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedGraph {
    graph: ComputeGraph,
    partition: Partition,
    axes: Vec<IndexSet>,
    expansions: Vec<ExpansionNode>,
    /// Expansion of the output to the full axis set, if it is not already there.
    output_expansion: Option<IndexSet>,
}

fn axes_of(dep: IndexSet, factor_sets: &[IndexSet]) -> IndexSet {
    IndexSet::from_indices(
        factor_sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.intersects(dep))
            .map(|(m, _)| m),
    )
}

/// Assigns every operation the factors its dependency set intersects and places expansion
/// joints where an argument has strictly fewer axes than its consumer.
pub fn plan_axes(g: &ComputeGraph, partition: &Partition) -> Result<TransformedGraph, AmtcError> {
    if partition.dim() != g.num_inputs() {
        return Err(AmtcError::PartitionMismatch {
            partition: partition.dim(),
            graph: g.num_inputs(),
        });
    }
    let factor_sets = partition.block_sets();
    let block_of = partition.block_of();
    let dm = dependency_matrix(g);
    let axes: Vec<IndexSet> = dm
        .rows()
        .iter()
        .map(|&r| axes_of(r, &factor_sets))
        .collect();
    let mut expansions = Vec::new();
    for (i, node) in g.nodes().iter().enumerate() {
        for (p, a) in node.args.iter().enumerate() {
            let from = match *a {
                Arg::Input(j) => IndexSet::singleton(block_of[j]),
                Arg::Node(j) => axes[j],
            };
            if from != axes[i] {
                debug_assert!(from.is_subset(axes[i]));
                expansions.push(ExpansionNode {
                    consumer: i,
                    arg: p,
                    from,
                    to: axes[i],
                });
            }
        }
    }
    let full = IndexSet::from_indices(0..partition.num_blocks());
    let out_axes = axes[g.output()];
    Ok(TransformedGraph {
        graph: g.clone(),
        partition: partition.clone(),
        axes,
        expansions,
        output_expansion: (out_axes != full).then_some(full),
    })
}

impl TransformedGraph {
    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Factor axes of each operation.
    pub fn axes(&self) -> &[IndexSet] {
        &self.axes
    }

    pub fn expansions(&self) -> &[ExpansionNode] {
        &self.expansions
    }

    /// Operations grouped by axis signature.
    pub fn subgraphs(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.axes.iter().enumerate() {
            out.entry(a.0).or_default().push(i);
        }
        out
    }

    /// Number of broadcast target elements for the given factor sizes.
    pub fn expansion_elements(&self, sizes: &[usize]) -> u64 {
        let cells = |s: IndexSet| s.iter().map(|m| sizes[m] as u64).product::<u64>();
        self.expansions.iter().map(|e| cells(e.to)).sum::<u64>()
            + self.output_expansion.map_or(0, cells)
    }
}

/// Result of a transformed evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmtcEvaluation {
    /// Model output at every grid point, canonical order.
    pub outputs: Vec<f64>,
    pub counters: OpCounters,
    pub expansion_elements: u64,
    /// Operation work plus `einsum_cost` per expansion element.
    pub work: u64,
}

/// Where an argument value lives: `data[offset + Σ_t idx_t * strides[t]]`, with `idx` the
/// consumer's multi-index over its own axes.
struct Source<'a> {
    data: &'a [f64],
    offset: usize,
    strides: Vec<usize>,
}

impl Source<'_> {
    fn at(&self, idx: &[usize]) -> f64 {
        let mut k = self.offset;
        for (i, s) in idx.iter().zip(&self.strides) {
            k += i * s;
        }
        self.data[k]
    }
}

fn block_strides(axes: &[usize], sizes: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; axes.len()];
    for t in (0..axes.len().saturating_sub(1)).rev() {
        strides[t] = strides[t + 1] * sizes[axes[t + 1]];
    }
    strides
}

/// Evaluates the transformed graph on a factor grid.
pub fn evaluate_amtc(
    tg: &TransformedGraph,
    grid: &FactorGrid,
    einsum_cost: u64,
) -> Result<AmtcEvaluation, AmtcError> {
    if grid.partition() != tg.partition() {
        return Err(AmtcError::GridMismatch);
    }
    let g = &tg.graph;
    let sizes = grid.sizes();
    let block_of = tg.partition.block_of();
    let col_of: Vec<usize> = {
        let mut c = vec![0; g.num_inputs()];
        for b in tg.partition.blocks() {
            for (p, &i) in b.iter().enumerate() {
                c[i] = p;
            }
        }
        c
    };
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(g.nodes().len());
    let mut counters = OpCounters::zeros(g.nodes().len());

    for (i, node) in g.nodes().iter().enumerate() {
        let axes: Vec<usize> = tg.axes[i].iter().collect();
        let shape: Vec<usize> = axes.iter().map(|&m| sizes[m]).collect();
        let count: usize = shape.iter().product();
        let sources: Vec<Source> = node
            .args
            .iter()
            .map(|a| match *a {
                Arg::Input(j) => {
                    let m = block_of[j];
                    let width = tg.partition.blocks()[m].len();
                    Source {
                        data: grid.blocks[m].data(),
                        offset: col_of[j],
                        strides: axes
                            .iter()
                            .map(|&t| if t == m { width } else { 0 })
                            .collect(),
                    }
                }
                Arg::Node(j) => {
                    let arg_axes: Vec<usize> = tg.axes[j].iter().collect();
                    let st = block_strides(&arg_axes, &sizes);
                    Source {
                        data: &values[j],
                        offset: 0,
                        strides: axes
                            .iter()
                            .map(|t| arg_axes.iter().position(|a| a == t).map_or(0, |p| st[p]))
                            .collect(),
                    }
                }
            })
            .collect();

        let mut out = vec![0.0; count];
        let chunk_results: Vec<Result<u64, (usize, FailureKind)>> = out
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let start = c * CHUNK;
                let mut idx = unravel(start, &shape);
                let mut inner = 0u64;
                let mut params = Vec::with_capacity(sources.len());
                for (e, slot) in chunk.iter_mut().enumerate() {
                    params.clear();
                    params.extend(sources.iter().map(|s| s.at(&idx)));
                    *slot = match &node.kind {
                        OpKind::FixedPoint(spec) => {
                            let (x, it) = solve_fixed_point(spec, &params)
                                .map_err(|f| (start + e, f.kind()))?;
                            inner += it;
                            x
                        }
                        kind => apply_elementary(kind, &params)
                            .map_err(|r| (start + e, FailureKind::Domain(r)))?,
                    };
                    for t in (0..shape.len()).rev() {
                        idx[t] += 1;
                        if idx[t] < shape[t] {
                            break;
                        }
                        idx[t] = 0;
                    }
                }
                Ok(inner)
            })
            .collect();
        for r in chunk_results {
            match r {
                Ok(it) => counters.inner_iterations += it,
                Err((flat, kind)) => {
                    let index = axes.iter().copied().zip(unravel(flat, &shape)).collect();
                    let node = node.id.clone();
                    return Err(match kind {
                        FailureKind::Domain(reason) => AmtcError::Domain {
                            node,
                            index,
                            reason,
                        },
                        FailureKind::NoConvergence(max_iter) => AmtcError::NoConvergence {
                            node,
                            index,
                            max_iter,
                        },
                    });
                }
            }
        }
        counters.counts[i] = count as u64;
        values.push(out);
    }

    let out_axes: Vec<usize> = tg.axes[g.output()].iter().collect();
    let all: Vec<usize> = (0..sizes.len()).collect();
    let outputs = if out_axes == all {
        values.swap_remove(g.output())
    } else {
        let st = block_strides(&out_axes, &sizes);
        let src = Source {
            data: &values[g.output()],
            offset: 0,
            strides: all
                .iter()
                .map(|t| out_axes.iter().position(|a| a == t).map_or(0, |p| st[p]))
                .collect(),
        };
        let total: usize = sizes.iter().product();
        (0..total).map(|e| src.at(&unravel(e, &sizes))).collect()
    };
    let expansion_elements = tg.expansion_elements(&sizes);
    let work = counted_cost(&counters, g) + einsum_cost * expansion_elements;
    Ok(AmtcEvaluation {
        outputs,
        counters,
        expansion_elements,
        work,
    })
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for t in (0..shape.len()).rev() {
        if shape[t] > 0 {
            idx[t] = flat % shape[t];
            flat /= shape[t];
        }
    }
    idx
}

/// Counts implied by the dependency matrix alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountPrediction {
    pub counts: Vec<u64>,
    pub total_cost: u64,
}

/// `count(φ) = Π n_m` over factors m whose inputs intersect dep(φ); total = Σ count·O(φ).
pub fn predict_counts(g: &ComputeGraph, partition: &Partition, sizes: &[usize]) -> CountPrediction {
    let sets = partition.block_sets();
    let dm = dependency_matrix(g);
    let counts: Vec<u64> = dm
        .rows()
        .iter()
        .map(|&dep| {
            axes_of(dep, &sets)
                .iter()
                .map(|m| sizes[m] as u64)
                .product()
        })
        .collect();
    let total_cost = counts
        .iter()
        .zip(g.nodes())
        .map(|(c, n)| c * n.unit_cost)
        .sum();
    CountPrediction { counts, total_cost }
}
