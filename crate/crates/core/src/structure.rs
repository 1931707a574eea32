//! Sparsity analysis and choice of tensor structure.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{ComputeGraph, DependencyMatrix};
use crate::partition::{enumerate_partitions, Partition, PartitionError};
use crate::quadrature::{required_points_eta, DEFAULT_ETA};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("total operation cost is zero")]
    ZeroCost,
    #[error("invalid partition: {0}")]
    Partition(#[from] PartitionError),
    #[error("accuracy level must be at least 1")]
    InvalidLevel,
    #[error("partition covers {got} inputs, model has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    /// SR(u_j) for every input.
    pub ratios: Vec<f64>,
    /// Cost of operations depending on each input.
    pub dependent_cost: Vec<u64>,
    pub total_cost: u64,
    pub threshold: f64,
    pub sparse: Vec<usize>,
    pub dense: Vec<usize>,
}

/// `SR(u_j) = Σ_i O(φ_i) D(φ_i, u_j) / Σ_i O(φ_i)`; inputs below `threshold` are sparse.
pub fn sparsity_ratios(
    g: &ComputeGraph,
    dm: &DependencyMatrix,
    threshold: f64,
) -> Result<SparsityReport, StructureError> {
    let total_cost = g.total_unit_cost();
    if total_cost == 0 {
        return Err(StructureError::ZeroCost);
    }
    let d = g.num_inputs();
    let mut dependent_cost = vec![0u64; d];
    for (node, row) in g.nodes().iter().zip(dm.rows()) {
        for j in row.iter() {
            dependent_cost[j] += node.unit_cost;
        }
    }
    let ratios: Vec<f64> = dependent_cost
        .iter()
        .map(|&c| c as f64 / total_cost as f64)
        .collect();
    let (sparse, dense) = (0..d).partition(|&j| ratios[j] < threshold);
    Ok(SparsityReport {
        ratios,
        dependent_cost,
        total_cost,
        threshold,
        sparse,
        dense,
    })
}

/// Factor sizes a plan would use: Gauss size k for singletons, `required_points` otherwise.
pub fn factor_points(partition: &Partition, k: usize, eta: f64) -> Vec<usize> {
    partition
        .blocks()
        .iter()
        .map(|b| required_points_eta(b.len(), k, eta))
        .collect()
}

/// Predicted AMTC work: `Σ_i O(φ_i) Π_{m: S_m ∩ dep(φ_i) ≠ ∅} n_m`.
pub fn estimate_cost(
    g: &ComputeGraph,
    dm: &DependencyMatrix,
    partition: &Partition,
    k: usize,
    eta: f64,
) -> u64 {
    let sizes = factor_points(partition, k, eta);
    let sets = partition.block_sets();
    g.nodes()
        .iter()
        .zip(dm.rows())
        .map(|(node, &dep)| {
            let mult: u64 = sets
                .iter()
                .zip(&sizes)
                .filter(|(s, _)| s.intersects(dep))
                .map(|(_, &n)| n as u64)
                .product();
            node.unit_cost * mult
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "partition")]
pub enum SelectionMode {
    Heuristic,
    Exhaustive,
    User(Partition),
}

impl SelectionMode {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::Heuristic => "heuristic",
            SelectionMode::Exhaustive => "exhaustive",
            SelectionMode::User(_) => "user",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectOptions {
    pub threshold: f64,
    pub eta: f64,
    /// Group all sparse inputs into one factor instead of one factor each.
    pub sparse_block: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            threshold: DEFAULT_THRESHOLD,
            eta: DEFAULT_ETA,
            sparse_block: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateCost {
    pub partition: Partition,
    pub points: u64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructurePlan {
    pub partition: Partition,
    pub k: usize,
    pub factor_points: Vec<usize>,
    pub total_points: u64,
    pub estimated_cost: u64,
    pub mode: &'static str,
    pub sparsity: SparsityReport,
    /// Every partition's cost, in enumeration order (exhaustive mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateCost>>,
}

/// The heuristic partition: dense inputs in one factor, sparse inputs as singletons (or as
/// one factor with `sparse_block`). No sparse inputs gives one factor; all sparse gives the
/// fully tensorial structure.
pub fn heuristic_partition(report: &SparsityReport, sparse_block: bool) -> Partition {
    let d = report.ratios.len();
    if report.sparse.is_empty() {
        return Partition::single_block(d);
    }
    if report.dense.is_empty() {
        return Partition::singletons(d);
    }
    let mut blocks = vec![report.dense.clone()];
    if sparse_block {
        blocks.push(report.sparse.clone());
    } else {
        blocks.extend(report.sparse.iter().map(|&j| vec![j]));
    }
    Partition::new(blocks, d).expect("sparse and dense sets partition the inputs")
}

pub fn select_structure(
    g: &ComputeGraph,
    dm: &DependencyMatrix,
    k: usize,
    mode: &SelectionMode,
    opts: &SelectOptions,
) -> Result<StructurePlan, StructureError> {
    if k == 0 {
        return Err(StructureError::InvalidLevel);
    }
    let sparsity = sparsity_ratios(g, dm, opts.threshold)?;
    let d = g.num_inputs();
    let mut candidates = None;
    let partition = match mode {
        SelectionMode::Heuristic => heuristic_partition(&sparsity, opts.sparse_block),
        SelectionMode::User(p) => {
            if p.dim() != d {
                return Err(StructureError::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            p.clone()
        }
        SelectionMode::Exhaustive => {
            let all = enumerate_partitions(d)?;
            let costs: Vec<CandidateCost> = all
                .into_par_iter()
                .map(|p| CandidateCost {
                    points: factor_points(&p, k, opts.eta)
                        .iter()
                        .map(|&n| n as u64)
                        .product(),
                    cost: estimate_cost(g, dm, &p, k, opts.eta),
                    partition: p,
                })
                .collect();
            let best = costs
                .iter()
                .min_by(|a, b| {
                    (a.cost, a.points, &a.partition).cmp(&(b.cost, b.points, &b.partition))
                })
                .expect("at least one partition")
                .partition
                .clone();
            candidates = Some(costs);
            best
        }
    };
    let factor_points = factor_points(&partition, k, opts.eta);
    Ok(StructurePlan {
        total_points: factor_points.iter().map(|&n| n as u64).product(),
        estimated_cost: estimate_cost(g, dm, &partition, k, opts.eta),
        factor_points,
        partition,
        k,
        mode: mode.name(),
        sparsity,
        candidates,
    })
}
