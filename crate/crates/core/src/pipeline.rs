//! End-to-end runs: analysis, UQ, convergence sweeps, Monte Carlo references, AMTC reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amtc::{evaluate_amtc, plan_axes, AmtcError, FactorGrid};
use crate::graph::{
    counted_cost, dependency_matrix, evaluate_naive, load_graph, ComputeGraph, EvalError,
    GraphError, PointSet,
};
use crate::models::BuiltinModel;
use crate::nipc::{self, moments, project, risk_measures, NipcError, RiskMeasures};
use crate::orthopoly::{Distribution, OrthoError};
use crate::partition::Partition;
use crate::quadrature::{
    compose_partial, full_grid, DesignOptions, Provenance, QuadratureError, QuadratureRule,
};
use crate::structure::{
    select_structure, SelectOptions, SelectionMode, StructureError, StructurePlan,
};

/// Error with the stage it came from.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("structure selection: {0}")]
    Structure(#[from] StructureError),
    #[error("quadrature: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("tensor-grid evaluation: {0}")]
    Amtc(#[from] AmtcError),
    #[error("model evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("projection: {0}")]
    Nipc(#[from] NipcError),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        let numerical = match self {
            PipelineError::Config(_) | PipelineError::Graph(_) => false,
            PipelineError::Structure(e) => matches!(e, StructureError::ZeroCost),
            PipelineError::Quadrature(e) => matches!(
                e,
                QuadratureError::Infeasible { .. }
                    | QuadratureError::Ortho(OrthoError::RuleFailure { .. })
            ),
            PipelineError::Amtc(e) => matches!(
                e,
                AmtcError::Domain { .. }
                    | AmtcError::NoConvergence { .. }
                    | AmtcError::NonFiniteInput { .. }
            ),
            PipelineError::Eval(e) => !matches!(e, EvalError::DimensionMismatch { .. }),
            PipelineError::Nipc(_) => false,
        };
        if numerical {
            3
        } else {
            2
        }
    }
}

/// A graph with input distributions.
#[derive(Debug, Clone)]
pub struct UqModel {
    pub name: String,
    pub graph: ComputeGraph,
    pub distributions: Vec<Distribution>,
}

impl From<BuiltinModel> for UqModel {
    fn from(m: BuiltinModel) -> Self {
        UqModel {
            name: m.name.to_string(),
            graph: m.graph,
            distributions: m.distributions,
        }
    }
}

/// Distribution file: a list in input order, or an object keyed by input name.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum DistributionsDoc {
    List(Vec<Distribution>),
    Named(std::collections::BTreeMap<String, Distribution>),
}

impl UqModel {
    pub fn from_documents(
        name: &str,
        graph_json: &str,
        dists_json: &str,
    ) -> Result<Self, PipelineError> {
        let graph = load_graph(graph_json)?;
        let doc: DistributionsDoc = serde_json::from_str(dists_json)
            .map_err(|e| PipelineError::Config(format!("distribution file: {e}")))?;
        let distributions = match doc {
            DistributionsDoc::List(v) => v,
            DistributionsDoc::Named(mut m) => {
                let mut out = Vec::with_capacity(graph.num_inputs());
                for input in graph.inputs() {
                    out.push(m.remove(input).ok_or_else(|| {
                        PipelineError::Config(format!("no distribution for input `{input}`"))
                    })?);
                }
                if let Some(extra) = m.keys().next() {
                    return Err(PipelineError::Config(format!(
                        "distribution given for unknown input `{extra}`"
                    )));
                }
                out
            }
        };
        let model = UqModel {
            name: name.to_string(),
            graph,
            distributions,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.distributions.len() != self.graph.num_inputs() {
            return Err(PipelineError::Config(format!(
                "{} distributions for {} inputs",
                self.distributions.len(),
                self.graph.num_inputs()
            )));
        }
        for d in &self.distributions {
            d.validate().map_err(QuadratureError::from)?;
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        self.graph.inputs()
    }

    pub fn distributions_json(&self) -> String {
        let named: std::collections::BTreeMap<String, Distribution> = self
            .names()
            .iter()
            .cloned()
            .zip(self.distributions.iter().copied())
            .collect();
        serde_json::to_string_pretty(&DistributionsDoc::Named(named)).expect("serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskConfig {
    pub threshold: f64,
    pub cvar_level: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub level: usize,
    /// Truncation order; `level - 1` when absent.
    pub order: Option<usize>,
    pub mode: SelectionMode,
    pub select: SelectOptions,
    pub design: DesignOptions,
    pub einsum_cost: u64,
    pub risk: Option<RiskConfig>,
}

impl RunConfig {
    pub fn new(level: usize) -> Self {
        RunConfig {
            level,
            order: None,
            mode: SelectionMode::Heuristic,
            select: SelectOptions::default(),
            design: DesignOptions::default(),
            einsum_cost: 0,
            risk: None,
        }
    }

    pub fn order(&self) -> usize {
        self.order.unwrap_or(self.level.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.level == 0 {
            return Err(PipelineError::Config("level k must be at least 1".into()));
        }
        if !(self.select.threshold > 0.0 && self.select.threshold <= 1.0) {
            return Err(PipelineError::Config("threshold must lie in (0, 1]".into()));
        }
        if self.select.eta.is_nan() || self.select.eta <= 0.0 {
            return Err(PipelineError::Config("eta must be positive".into()));
        }
        Ok(())
    }
}

/// `{{h,v},{W_p},{sigma}}` style rendering with input names.
pub fn named_partition(p: &Partition, names: &[String]) -> String {
    let blocks: Vec<String> = p
        .blocks()
        .iter()
        .map(|b| {
            let inner: Vec<&str> = b.iter().map(|&i| names[i].as_str()).collect();
            format!("{{{}}}", inner.join(","))
        })
        .collect();
    format!("{{{}}}", blocks.join(","))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRow {
    pub input: String,
    pub ratio: f64,
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRow {
    pub partition: String,
    pub points: u64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyRow {
    pub id: String,
    pub cost: u64,
    /// One 0/1 entry per input.
    pub depends_on: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub model: String,
    pub inputs: Vec<String>,
    pub level: usize,
    pub mode: &'static str,
    pub threshold: f64,
    pub dependency: Vec<DependencyRow>,
    pub sparsity: Vec<SparsityRow>,
    pub partition: String,
    pub factor_points: Vec<usize>,
    pub estimated_cost: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateRow>>,
}

pub fn select_plan(model: &UqModel, cfg: &RunConfig) -> Result<StructurePlan, PipelineError> {
    cfg.validate()?;
    model.validate()?;
    let dm = dependency_matrix(&model.graph);
    Ok(select_structure(
        &model.graph,
        &dm,
        cfg.level,
        &cfg.mode,
        &cfg.select,
    )?)
}

pub fn analyze(model: &UqModel, cfg: &RunConfig) -> Result<AnalyzeReport, PipelineError> {
    let plan = select_plan(model, cfg)?;
    let names = model.names();
    let dm = dependency_matrix(&model.graph);
    let table = dm.to_table();
    let dependency = model
        .graph
        .nodes()
        .iter()
        .zip(table)
        .map(|(n, row)| DependencyRow {
            id: n.id.clone(),
            cost: n.unit_cost,
            depends_on: row,
        })
        .collect();
    let sparsity = names
        .iter()
        .enumerate()
        .map(|(j, name)| SparsityRow {
            input: name.clone(),
            ratio: plan.sparsity.ratios[j],
            sparse: plan.sparsity.sparse.contains(&j),
        })
        .collect();
    Ok(AnalyzeReport {
        model: model.name.clone(),
        inputs: names.to_vec(),
        level: cfg.level,
        mode: plan.mode,
        threshold: plan.sparsity.threshold,
        dependency,
        sparsity,
        partition: named_partition(&plan.partition, names),
        factor_points: plan.factor_points.clone(),
        estimated_cost: plan.estimated_cost,
        candidates: plan.candidates.as_ref().map(|c| {
            c.iter()
                .map(|c| CandidateRow {
                    partition: named_partition(&c.partition, names),
                    points: c.points,
                    cost: c.cost,
                })
                .collect()
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorSummary {
    pub inputs: Vec<String>,
    pub provenance: Provenance,
    pub points: usize,
    pub requested_points: usize,
    pub escalations: u32,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorkSummary {
    /// Work units if every operation ran at every grid point.
    pub naive: u64,
    /// Work units measured by the transformed evaluation.
    pub amtc: u64,
    /// Work units predicted from required point counts before any escalation.
    pub estimated: u64,
    pub expansion_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UqReport {
    pub model: String,
    pub inputs: Vec<String>,
    pub level: usize,
    pub order: usize,
    pub mode: &'static str,
    pub partition: String,
    pub structure: Vec<Vec<usize>>,
    pub factors: Vec<FactorSummary>,
    pub total_points: usize,
    pub work: WorkSummary,
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub rule_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskMeasures>,
}

/// Everything a UQ run produces.
#[derive(Debug, Clone)]
pub struct UqRun {
    pub report: UqReport,
    pub rule: QuadratureRule,
    pub pce: nipc::PceModel,
    pub outputs: Vec<f64>,
}

pub fn run_uq(model: &UqModel, cfg: &RunConfig) -> Result<UqRun, PipelineError> {
    let plan = select_plan(model, cfg)?;
    run_with_partition(model, cfg, &plan.partition, plan.mode, plan.estimated_cost)
}

fn run_with_partition(
    model: &UqModel,
    cfg: &RunConfig,
    partition: &Partition,
    mode: &'static str,
    estimated: u64,
) -> Result<UqRun, PipelineError> {
    let rule = compose_partial(partition, &model.distributions, cfg.level, &cfg.design)?;
    run_on_rule(model, cfg, rule, mode, estimated)
}

fn run_on_rule(
    model: &UqModel,
    cfg: &RunConfig,
    rule: QuadratureRule,
    mode: &'static str,
    estimated: u64,
) -> Result<UqRun, PipelineError> {
    let names = model.names();
    let tg = plan_axes(&model.graph, rule.structure())?;
    let grid = FactorGrid::from_rule(&rule);
    let ev = evaluate_amtc(&tg, &grid, cfg.einsum_cost)?;
    let p = cfg.order();
    let pce = project(&ev.outputs, &rule, p)?;
    let m = moments(&pce);
    let risk = cfg
        .risk
        .map(|r| risk_measures(&pce, r.threshold, r.cvar_level, r.samples, r.seed))
        .transpose()?;
    let factors = rule
        .factors()
        .iter()
        .map(|f| FactorSummary {
            inputs: f.inputs.iter().map(|&i| names[i].clone()).collect(),
            provenance: f.provenance,
            points: f.len(),
            requested_points: f.requested_points,
            escalations: f.escalations,
            residual: f.residual,
        })
        .collect();
    let report = UqReport {
        model: model.name.clone(),
        inputs: names.to_vec(),
        level: cfg.level,
        order: p,
        mode,
        partition: named_partition(rule.structure(), names),
        structure: rule.structure().blocks().to_vec(),
        factors,
        total_points: rule.len(),
        work: WorkSummary {
            naive: rule.len() as u64 * model.graph.total_unit_cost(),
            amtc: ev.work,
            estimated,
            expansion_elements: ev.expansion_elements,
        },
        mean: m.mean,
        variance: m.variance,
        std_dev: m.std_dev,
        rule_sha256: rule.content_hash(),
        risk,
    };
    Ok(UqRun {
        report,
        rule,
        pce,
        outputs: ev.outputs,
    })
}

/// Reference value for convergence sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Reference {
    /// Full Gauss grid at this level.
    FullGrid(usize),
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub method: &'static str,
    pub k: usize,
    pub p: usize,
    pub points: usize,
    pub naive_work: u64,
    pub amtc_work: u64,
    pub mean: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub reference: f64,
    pub partition: String,
    pub rows: Vec<ConvergenceRow>,
}

pub const CONVERGENCE_HEADER: &str =
    "method,k,p,points,naive_work,amtc_work,mean,abs_error,rel_error";

impl ConvergenceTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CONVERGENCE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:e},{:e},{:e}\n",
                r.method,
                r.k,
                r.p,
                r.points,
                r.naive_work,
                r.amtc_work,
                r.mean,
                r.abs_error,
                r.rel_error
            ));
        }
        out
    }
}

/// Sweeps k over full Gauss grids, single-block designed rules and the selected partial
/// structure. Levels whose designed rule is infeasible are skipped with a warning.
pub fn run_convergence(
    model: &UqModel,
    cfg: &RunConfig,
    levels: &[usize],
    reference: Reference,
) -> Result<ConvergenceTable, PipelineError> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(PipelineError::Config(
            "levels must be a non-empty list of k >= 1".into(),
        ));
    }
    let max_k = *levels.iter().max().expect("non-empty");
    let reference = match reference {
        Reference::Value(v) => v,
        Reference::MonteCarlo { samples, seed } => run_mc(model, samples, seed)?.mean,
        Reference::FullGrid(k_ref) => {
            if k_ref < max_k + 2 {
                return Err(PipelineError::Config(format!(
                    "reference level {k_ref} must be at least max k + 2 = {}",
                    max_k + 2
                )));
            }
            let mut c = cfg.clone();
            c.level = k_ref;
            c.order = Some(0);
            let rule = full_grid(&model.distributions, k_ref)?;
            run_on_rule(model, &c, rule, "reference", 0)?.report.mean
        }
    };
    let d = model.distributions.len();
    let mut rows = Vec::new();
    let mut partition = String::new();
    for &k in levels {
        let mut c = cfg.clone();
        c.level = k;
        c.order = None;
        c.risk = None;
        let plan = select_plan(model, &c)?;
        partition = named_partition(&plan.partition, model.names());
        let attempts: [(&'static str, Partition); 3] = [
            ("full_gauss", Partition::singletons(d)),
            ("designed", Partition::single_block(d)),
            ("partial", plan.partition.clone()),
        ];
        for (method, p) in attempts {
            match run_with_partition(model, &c, &p, plan.mode, 0) {
                Ok(run) => {
                    let err = (run.report.mean - reference).abs();
                    rows.push(ConvergenceRow {
                        method,
                        k,
                        p: c.order(),
                        points: run.report.total_points,
                        naive_work: run.report.work.naive,
                        amtc_work: run.report.work.amtc,
                        mean: run.report.mean,
                        abs_error: err,
                        rel_error: err / reference.abs().max(f64::MIN_POSITIVE),
                    });
                }
                Err(PipelineError::Quadrature(e @ QuadratureError::Infeasible { .. })) => {
                    log::warn!("{method} at k={k} skipped: {e}");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ConvergenceTable {
        reference,
        partition,
        rows,
    })
}

/// Streaming moments with pairwise merging (Chan / Pébay).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Accumulator {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Accumulator {
    fn push(&mut self, x: f64) {
        self.merge(&Accumulator {
            n: 1.0,
            mean: x,
            ..Default::default()
        });
    }

    fn merge(&mut self, b: &Accumulator) {
        if b.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *b;
            return;
        }
        let a = *self;
        let n = a.n + b.n;
        let d = b.mean - a.mean;
        let (d2, d3, d4) = (d * d, d * d * d, d * d * d * d);
        self.mean = a.mean + d * b.n / n;
        self.m2 = a.m2 + b.m2 + d2 * a.n * b.n / n;
        self.m3 = a.m3
            + b.m3
            + d3 * a.n * b.n * (a.n - b.n) / (n * n)
            + 3.0 * d * (a.n * b.m2 - b.n * a.m2) / n;
        self.m4 = a.m4
            + b.m4
            + d4 * a.n * b.n * (a.n * a.n - a.n * b.n + b.n * b.n) / (n * n * n)
            + 6.0 * d2 * (a.n * a.n * b.m2 + b.n * b.n * a.m2) / (n * n)
            + 4.0 * d * (a.n * b.m3 - b.n * a.m3) / n;
        self.n = n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McResult {
    pub samples: usize,
    pub seed: u64,
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
}

/// Plain Monte Carlo on the graph itself (naive evaluator), deterministic per seed.
pub fn run_mc(model: &UqModel, samples: usize, seed: u64) -> Result<McResult, PipelineError> {
    model.validate()?;
    if samples < 2 {
        return Err(PipelineError::Config(
            "Monte Carlo needs at least 2 samples".into(),
        ));
    }
    let fams: Vec<_> = model.distributions.iter().map(|d| d.family()).collect();
    let maps: Vec<_> = model.distributions.iter().map(|d| d.affine_map()).collect();
    let d = fams.len();
    let parts: Vec<Accumulator> = nipc::chunks(samples)
        .into_par_iter()
        .map(|(c, len)| {
            let mut z = nipc::standard_chunk(&fams, seed, c, len);
            for (i, v) in z.iter_mut().enumerate() {
                *v = maps[i % d].to_physical(*v);
            }
            let ev = evaluate_naive(&model.graph, &PointSet::new(d, z))?;
            let mut part = Accumulator::default();
            for y in ev.outputs {
                part.push(y);
            }
            Ok(part)
        })
        .collect::<Result<_, EvalError>>()?;
    // merged in chunk order so the result does not depend on scheduling
    let mut acc = Accumulator::default();
    for part in &parts {
        acc.merge(part);
    }
    let n = acc.n;
    let variance = acc.m2 / (n - 1.0);
    let m2 = acc.m2 / n;
    let m4 = acc.m4 / n;
    Ok(McResult {
        samples,
        seed,
        mean: acc.mean,
        variance,
        mean_se: (variance / n).sqrt(),
        variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperationReport {
    pub id: String,
    pub unit_cost: u64,
    /// Input names of the factors this operation is evaluated over.
    pub axes: Vec<Vec<String>>,
    pub predicted: u64,
    pub measured: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmtcReport {
    pub model: String,
    pub partition: String,
    pub factor_points: Vec<usize>,
    pub total_points: usize,
    pub operations: Vec<OperationReport>,
    pub expansion_joints: usize,
    pub expansion_elements: u64,
    pub einsum_cost: u64,
    pub naive_work: u64,
    pub amtc_work: u64,
    /// Largest |AMTC - naive| over the grid outputs.
    pub max_output_difference: f64,
}

/// Evaluates the plan's grid both ways and reports per-operation counts.
pub fn amtc_report(model: &UqModel, cfg: &RunConfig) -> Result<AmtcReport, PipelineError> {
    let plan = select_plan(model, cfg)?;
    let rule = compose_partial(
        &plan.partition,
        &model.distributions,
        cfg.level,
        &cfg.design,
    )?;
    let tg = plan_axes(&model.graph, rule.structure())?;
    let grid = FactorGrid::from_rule(&rule);
    let ev = evaluate_amtc(&tg, &grid, cfg.einsum_cost)?;
    let naive = evaluate_naive(&model.graph, rule.nodes())?;
    let sizes = grid.sizes();
    let pred = crate::amtc::predict_counts(&model.graph, rule.structure(), &sizes);
    let names = model.names();
    let blocks = rule.structure().blocks();
    let operations = model
        .graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| OperationReport {
            id: n.id.clone(),
            unit_cost: n.unit_cost,
            axes: tg.axes()[i]
                .iter()
                .map(|m| blocks[m].iter().map(|&j| names[j].clone()).collect())
                .collect(),
            predicted: pred.counts[i],
            measured: ev.counters.counts[i],
        })
        .collect();
    let max_output_difference = ev
        .outputs
        .iter()
        .zip(&naive.outputs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(AmtcReport {
        model: model.name.clone(),
        partition: named_partition(rule.structure(), names),
        factor_points: sizes,
        total_points: rule.len(),
        operations,
        expansion_joints: tg.expansions().len(),
        expansion_elements: ev.expansion_elements,
        einsum_cost: cfg.einsum_cost,
        naive_work: counted_cost(&naive.counters, &model.graph),
        amtc_work: ev.work,
        max_output_difference,
    })
}
