//! Non-intrusive polynomial chaos on computational graphs, with quadrature rules built as
//! tensor products of lower-dimensional factors and a graph transformation that evaluates
//! each operation only over the factors it depends on.
//!
//! The usual flow is [`structure::select_structure`] to pick a partition of the inputs,
//! [`quadrature::compose_partial`] to build the rule, [`amtc::evaluate_amtc`] to run the
//! model on it and [`nipc::project`] for the chaos coefficients. [`pipeline::run_uq`] wires
//! these together.

pub mod amtc;
pub mod graph;
pub mod models;
pub mod nipc;
pub mod orthopoly;
pub mod partition;
pub mod pipeline;
pub mod quadrature;
pub mod structure;

pub use amtc::{evaluate_amtc, plan_axes, AmtcError, AmtcEvaluation, FactorGrid, TransformedGraph};
pub use graph::{
    dependency_matrix, evaluate_naive, load_graph, ComputeGraph, CostTable, DependencyMatrix,
    EvalError, GraphBuilder, GraphError, IndexSet, OpCounters, OpKind, PointSet,
};
pub use nipc::{moments, project, risk_measures, Moments, NipcError, PceModel, RiskMeasures};
pub use orthopoly::{Distribution, OrthoError, PolyFamily};
pub use partition::{enumerate_partitions, Partition, PartitionError};
pub use pipeline::{run_uq, PipelineError, RunConfig, UqModel, UqReport};
pub use quadrature::{
    compose_partial, full_grid, smolyak_grid, DesignOptions, QuadratureError, QuadratureRule,
};
pub use structure::{select_structure, SelectOptions, SelectionMode, StructurePlan};
