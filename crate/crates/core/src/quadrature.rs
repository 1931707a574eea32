//! Multivariate quadrature: tensor grids, Smolyak sparse grids, designed (moment-matching)
//! rules and partially tensor-structured compositions.
//!
//! Rules keep both standardized and physical nodes. Composite rules are the cartesian
//! product of their factor rules in canonical factor order (factors sorted by smallest
//! input index, row-major flattening, first factor slowest).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::PointSet;
use crate::orthopoly::{
    basis_indices, binomial, gauss_rule_1d, BasisIndexSet, Distribution, OrthoError, PolyFamily,
};
use crate::partition::{Partition, PartitionError};

pub const DEFAULT_SEED: u64 = 20240917;
pub const DEFAULT_ETA: f64 = 0.9;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("accuracy level must be at least 1, got {0}")]
    InvalidLevel(usize),
    #[error("expected {expected} distributions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(
        "designed quadrature infeasible for factor {factor} (inputs {inputs:?}): best residual {best_residual:.3e} with {points} points"
    )]
    Infeasible {
        factor: usize,
        inputs: Vec<usize>,
        best_residual: f64,
        points: usize,
    },
    #[error("malformed rule: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gauss,
    Designed,
    /// Signed combination of tensor grids; weights may be negative.
    Smolyak,
}

/// A rule over the inputs of one factor, in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRule {
    pub inputs: Vec<usize>,
    pub provenance: Provenance,
    pub k: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Moment residual norm over total degree <= 2k-1.
    pub residual: f64,
    /// Point count asked of the optimizer before any escalation (designed factors only).
    #[serde(default)]
    pub requested_points: usize,
    #[serde(default)]
    pub escalations: u32,
}

impl FactorRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Quadrature rule over all `d` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dists: Vec<Distribution>,
    structure: Partition,
    factors: Vec<FactorRule>,
    k: usize,
    std_nodes: PointSet,
    nodes: PointSet,
    weights: Vec<f64>,
}

/// Product of factor weights taken in ascending order, so the rounding does not depend on
/// how the inputs were labelled.
pub fn weight_product(parts: &mut [f64]) -> f64 {
    parts.sort_by(f64::total_cmp);
    parts.iter().product()
}

impl QuadratureRule {
    /// Cartesian product of factor rules. Factors must follow the canonical order of `structure`.
    pub fn from_factors(
        dists: Vec<Distribution>,
        structure: Partition,
        factors: Vec<FactorRule>,
        k: usize,
    ) -> Result<Self, QuadratureError> {
        let d = dists.len();
        if structure.dim() != d {
            return Err(QuadratureError::DimensionMismatch {
                expected: structure.dim(),
                got: d,
            });
        }
        if factors.len() != structure.num_blocks() {
            return Err(QuadratureError::Malformed(format!(
                "{} factors for {} blocks",
                factors.len(),
                structure.num_blocks()
            )));
        }
        for (f, block) in factors.iter().zip(structure.blocks()) {
            if &f.inputs != block {
                return Err(QuadratureError::Malformed(format!(
                    "factor inputs {:?} do not match block {:?}",
                    f.inputs, block
                )));
            }
            if f.nodes.len() != f.weights.len() || f.nodes.iter().any(|r| r.len() != block.len()) {
                return Err(QuadratureError::Malformed(format!(
                    "factor {:?} has inconsistent node shape",
                    block
                )));
            }
        }
        let maps: Vec<_> = dists
            .iter()
            .map(|dist| dist.standardize().map(|(m, _)| m))
            .collect::<Result<_, _>>()?;

        let sizes: Vec<usize> = factors.iter().map(|f| f.len()).collect();
        let total: usize = if d == 0 { 0 } else { sizes.iter().product() };
        let mut std_data = vec![0.0; total * d];
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; factors.len()];
        let mut parts = vec![0.0; factors.len()];
        for row in 0..total {
            for (m, f) in factors.iter().enumerate() {
                parts[m] = f.weights[idx[m]];
                for (c, &input) in f.inputs.iter().enumerate() {
                    std_data[row * d + input] = f.nodes[idx[m]][c];
                }
            }
            weights.push(weight_product(&mut parts));
            // last factor fastest
            for m in (0..factors.len()).rev() {
                idx[m] += 1;
                if idx[m] < sizes[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        let phys: Vec<f64> = std_data
            .iter()
            .enumerate()
            .map(|(i, &z)| maps[i % d.max(1)].to_physical(z))
            .collect();
        Ok(QuadratureRule {
            dists,
            structure,
            factors,
            k,
            std_nodes: PointSet::new(d, std_data),
            nodes: PointSet::new(d, phys),
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dists.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn level(&self) -> usize {
        self.k
    }

    pub fn distributions(&self) -> &[Distribution] {
        &self.dists
    }

    pub fn structure(&self) -> &Partition {
        &self.structure
    }

    pub fn factors(&self) -> &[FactorRule] {
        &self.factors
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.len()).collect()
    }

    /// Nodes in physical units.
    pub fn nodes(&self) -> &PointSet {
        &self.nodes
    }

    pub fn standardized_nodes(&self) -> &PointSet {
        &self.std_nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn families(&self) -> Vec<PolyFamily> {
        self.dists.iter().map(|d| d.family()).collect()
    }

    /// Physical coordinates of the factor blocks, for tensor-grid evaluation.
    pub fn physical_factor_blocks(&self) -> Vec<PointSet> {
        self.factors
            .iter()
            .map(|f| {
                let maps: Vec<_> = f
                    .inputs
                    .iter()
                    .map(|&i| self.dists[i].affine_map())
                    .collect();
                let rows: Vec<Vec<f64>> = f
                    .nodes
                    .iter()
                    .map(|r| {
                        r.iter()
                            .zip(&maps)
                            .map(|(z, m)| m.to_physical(*z))
                            .collect()
                    })
                    .collect();
                PointSet::from_rows(f.inputs.len(), &rows)
            })
            .collect()
    }

    pub fn has_negative_weights(&self) -> bool {
        self.weights.iter().any(|&w| w < 0.0)
    }

    pub fn moment_residual(&self, r: usize) -> MomentResidual {
        moment_residual(&self.families(), &self.std_nodes, &self.weights, r)
    }

    pub fn to_file(&self) -> RuleFile {
        RuleFile {
            level: self.k,
            distributions: self.dists.clone(),
            structure: self.structure.blocks().to_vec(),
            canonical_order: CANONICAL_ORDER_NOTE.to_string(),
            factors: self.factors.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("rule serializes")
    }

    /// Lowercase hex SHA-256 of [`QuadratureRule::to_json`].
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// CSV node cloud in physical units: one column per input then `weight`.
    pub fn nodes_csv(&self, names: &[String]) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim())
            .map(|j| {
                names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("u{}", j + 1))
            })
            .chain(std::iter::once("weight".to_string()))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (row, w) in self.nodes.rows().zip(&self.weights) {
            let cells: Vec<String> = row
                .iter()
                .chain(std::iter::once(w))
                .map(|v| format!("{v:e}"))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

const CANONICAL_ORDER_NOTE: &str =
    "cartesian product of factors sorted by smallest input index, row-major, first factor slowest";

/// Serialized form of a [`QuadratureRule`]. Factor nodes are in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub level: usize,
    pub distributions: Vec<Distribution>,
    pub structure: Vec<Vec<usize>>,
    pub canonical_order: String,
    pub factors: Vec<FactorRule>,
}

impl RuleFile {
    pub fn into_rule(self) -> Result<QuadratureRule, QuadratureError> {
        let d = self.distributions.len();
        let structure = Partition::new(self.structure, d)?;
        QuadratureRule::from_factors(self.distributions, structure, self.factors, self.level)
    }
}

/// Moment-matching residual `R_α = Σ_i w_i Φ_α(x_i) − δ_{α0}` over total degree <= r.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentResidual {
    pub indices: BasisIndexSet,
    pub residual: Vec<f64>,
    pub norm: f64,
}

pub fn moment_residual(
    fams: &[PolyFamily],
    std_nodes: &PointSet,
    weights: &[f64],
    r: usize,
) -> MomentResidual {
    let indices = basis_indices(fams.len(), r);
    let mut residual = vec![0.0; indices.len()];
    residual[0] = -1.0;
    let mut tables = vec![vec![0.0; r + 1]; fams.len()];
    for (x, &w) in std_nodes.rows().zip(weights) {
        for ((t, f), &xj) in tables.iter_mut().zip(fams).zip(x) {
            f.eval_into(xj, t);
        }
        for (res, alpha) in residual.iter_mut().zip(&indices.indices) {
            let phi: f64 = alpha
                .iter()
                .zip(&tables)
                .map(|(&a, t)| t[a as usize])
                .product();
            *res += w * phi;
        }
    }
    let norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    MomentResidual {
        indices,
        residual,
        norm,
    }
}

fn check_level(k: usize) -> Result<(), QuadratureError> {
    if k == 0 {
        Err(QuadratureError::InvalidLevel(k))
    } else {
        Ok(())
    }
}

fn gauss_factor(fam: &PolyFamily, input: usize, k: usize) -> Result<FactorRule, QuadratureError> {
    let rule = gauss_rule_1d(fam, k)?;
    let nodes: Vec<Vec<f64>> = rule.nodes.iter().map(|&x| vec![x]).collect();
    let residual = moment_residual(
        std::slice::from_ref(fam),
        &PointSet::new(1, rule.nodes.clone()),
        &rule.weights,
        2 * k - 1,
    )
    .norm;
    Ok(FactorRule {
        inputs: vec![input],
        provenance: Provenance::Gauss,
        k,
        nodes,
        weights: rule.weights,
        residual,
        requested_points: k,
        escalations: 0,
    })
}

/// Full tensor Gauss grid with k points per dimension.
pub fn full_grid(dists: &[Distribution], k: usize) -> Result<QuadratureRule, QuadratureError> {
    check_level(k)?;
    let factors = dists
        .iter()
        .enumerate()
        .map(|(j, d)| gauss_factor(&d.family(), j, k))
        .collect::<Result<Vec<_>, _>>()?;
    QuadratureRule::from_factors(
        dists.to_vec(),
        Partition::singletons(dists.len()),
        factors,
        k,
    )
}

/// Smolyak sparse grid from non-nested Gauss rules.
///
/// Level `l >= 1` combines tensor grids with 1D sizes `i_j >= 1`, `l <= |i| <= l+d-1`, with
/// coefficient `(-1)^(l+d-1-|i|) C(d-1, l+d-1-|i|)`. Level `l` in one dimension is the
/// l-point Gauss rule; the result integrates total degree <= 2l-1.
pub fn smolyak_grid(
    dists: &[Distribution],
    level: usize,
) -> Result<QuadratureRule, QuadratureError> {
    check_level(level)?;
    let d = dists.len();
    let fams: Vec<PolyFamily> = dists
        .iter()
        .map(|x| x.standardize().map(|(_, f)| f))
        .collect::<Result<_, _>>()?;
    let q = level + d - 1;
    let rules: Vec<Vec<_>> = fams
        .iter()
        .map(|f| (1..=level).map(|i| gauss_rule_1d(f, i)).collect())
        .collect::<Vec<Vec<_>>>()
        .into_iter()
        .map(|v| v.into_iter().collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;

    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut multi = vec![1usize; d];
    loop {
        let s: usize = multi.iter().sum();
        if s >= level && s <= q {
            let gap = (q - s) as u64;
            let coef =
                binomial(d as u64 - 1, gap) as f64 * if gap.is_multiple_of(2) { 1.0 } else { -1.0 };
            let sub: Vec<&crate::orthopoly::Rule1d> = multi
                .iter()
                .enumerate()
                .map(|(j, &i)| &rules[j][i - 1])
                .collect();
            let mut idx = vec![0usize; d];
            'grid: loop {
                let x: Vec<f64> = (0..d).map(|j| sub[j].nodes[idx[j]]).collect();
                let w = coef * (0..d).map(|j| sub[j].weights[idx[j]]).product::<f64>();
                match nodes
                    .iter()
                    .position(|y| y.iter().zip(&x).all(|(a, b)| (a - b).abs() <= DEDUP_TOL))
                {
                    Some(p) => weights[p] += w,
                    None => {
                        nodes.push(x);
                        weights.push(w);
                    }
                }
                for j in (0..d).rev() {
                    idx[j] += 1;
                    if idx[j] < sub[j].nodes.len() {
                        continue 'grid;
                    }
                    idx[j] = 0;
                }
                break;
            }
        }
        // next multi-index with entries in 1..=level
        let mut j = d;
        loop {
            if j == 0 {
                let residual = moment_residual(
                    &fams,
                    &PointSet::from_rows(d, &nodes),
                    &weights,
                    2 * level - 1,
                )
                .norm;
                let factor = FactorRule {
                    inputs: (0..d).collect(),
                    provenance: Provenance::Smolyak,
                    k: level,
                    nodes,
                    weights,
                    residual,
                    requested_points: 0,
                    escalations: 0,
                };
                return QuadratureRule::from_factors(
                    dists.to_vec(),
                    Partition::single_block(d),
                    vec![factor],
                    level,
                );
            }
            j -= 1;
            multi[j] += 1;
            if multi[j] <= level {
                break;
            }
            multi[j] = 1;
        }
    }
}

/// Point count heuristic: `ceil(k^d / d)` for d <= 2, `ceil(eta (2d)^(k-1) / (k-1)!)` above.
pub fn required_points(d: usize, k: usize) -> usize {
    required_points_eta(d, k, DEFAULT_ETA)
}

pub fn required_points_eta(d: usize, k: usize, eta: f64) -> usize {
    assert!(d >= 1 && k >= 1, "required_points needs d >= 1 and k >= 1");
    if d <= 2 {
        let kd = k.pow(d as u32);
        kd.div_ceil(d)
    } else {
        let mut v = eta;
        for i in 1..k {
            v *= (2 * d) as f64 / i as f64;
        }
        ((v - 1e-9).ceil() as usize).max(1)
    }
}

/// Optimizer settings for designed quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Acceptance threshold on ||R||.
    pub tol: f64,
    /// Optimization continues past `tol` down to this residual.
    pub polish_tol: f64,
    pub escalation_factor: f64,
    pub max_escalations: u32,
    pub eta: f64,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            seed: DEFAULT_SEED,
            restarts: 8,
            max_iter: 1000,
            tol: RESIDUAL_TOL,
            polish_tol: 1e-14,
            escalation_factor: 1.5,
            max_escalations: 4,
            eta: DEFAULT_ETA,
        }
    }
}

/// Result of one designed-quadrature solve, in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignedRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub residual: f64,
    pub feasible: bool,
    pub restarts_used: usize,
}

/// Solves `min ||R(x, w)||` over `n` nodes inside the clipping box with `w = c^2 > 0`,
/// matching all moments of total degree <= r. `attempt` selects the seed stream.
pub fn designed_quadrature(
    dists: &[Distribution],
    r: usize,
    n: usize,
    opts: &DesignOptions,
    attempt: u32,
) -> Result<DesignedRule, QuadratureError> {
    if n == 0 {
        return Err(OrthoError::ZeroPoints.into());
    }
    let fams: Vec<PolyFamily> = dists
        .iter()
        .map(|x| x.standardize().map(|(_, f)| f))
        .collect::<Result<_, _>>()?;
    let problem = MomentProblem::new(&fams, r, n);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut used = 0;
    for restart in 0..opts.restarts.max(1) {
        used = restart + 1;
        let seed = opts
            .seed
            .wrapping_add(((attempt as u64) << 32) | restart as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, norm) = problem.solve(&mut rng, opts);
        if best.as_ref().is_none_or(|b| norm < b.1) {
            best = Some((params, norm));
        }
        if norm <= opts.tol {
            break;
        }
    }
    let (params, residual) = best.expect("at least one restart");
    let s = fams.len();
    let mut pts: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let base = i * (s + 1);
            let c = params[base + s];
            (params[base..base + s].to_vec(), c * c)
        })
        .collect();
    pts.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (nodes, weights) = pts.into_iter().unzip();
    Ok(DesignedRule {
        nodes,
        weights,
        residual,
        feasible: residual <= opts.tol,
        restarts_used: used,
    })
}

/// Marquardt damping uses `max(diag(J^T J), DAMPING_FLOOR * mean(diag))`.
const DAMPING_FLOOR: f64 = 1e-3;

/// A run that improves by less than 1% over this many iterations is abandoned.
const STALL_WINDOW: usize = 100;

/// Unknowns are laid out per point: `[x_i1 .. x_is, c_i]`, `w_i = c_i^2`.
struct MomentProblem<'a> {
    fams: &'a [PolyFamily],
    alphas: Vec<Vec<u32>>,
    r: usize,
    n: usize,
    boxes: Vec<(f64, f64)>,
}

impl<'a> MomentProblem<'a> {
    fn new(fams: &'a [PolyFamily], r: usize, n: usize) -> Self {
        MomentProblem {
            fams,
            alphas: basis_indices(fams.len(), r).indices,
            r,
            n,
            boxes: fams.iter().map(|f| f.clip_box()).collect(),
        }
    }

    fn dim(&self) -> usize {
        self.fams.len()
    }

    fn num_params(&self) -> usize {
        self.n * (self.dim() + 1)
    }

    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.dim();
        let c0 = (1.0 / self.n as f64).sqrt();
        let mut p = Vec::with_capacity(self.num_params());
        for _ in 0..self.n {
            for (f, &(lo, hi)) in self.fams.iter().zip(&self.boxes) {
                p.push(f.sample_standard(rng).clamp(lo, hi));
            }
            p.push(c0);
        }
        debug_assert_eq!(p.len(), self.n * (s + 1));
        p
    }

    fn project(&self, p: &mut [f64]) {
        let s = self.dim();
        for i in 0..self.n {
            for (j, &(lo, hi)) in self.boxes.iter().enumerate() {
                let v = &mut p[i * (s + 1) + j];
                *v = v.clamp(lo, hi);
            }
        }
    }

    fn residual(&self, p: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let s = self.dim();
        let m = self.alphas.len();
        let mut res = DVector::zeros(m);
        res[0] = -1.0;
        let mut vals = vec![vec![0.0; self.r + 1]; s];
        let mut ders = vec![vec![0.0; self.r + 1]; s];
        let want_jac = jac.is_some();
        let mut jac = jac;
        for i in 0..self.n {
            let base = i * (s + 1);
            let c = p[base + s];
            for j in 0..s {
                if want_jac {
                    self.fams[j].eval_with_derivative(p[base + j], &mut vals[j], &mut ders[j]);
                } else {
                    self.fams[j].eval_into(p[base + j], &mut vals[j]);
                }
            }
            for (a, alpha) in self.alphas.iter().enumerate() {
                let phi: f64 = (0..s).map(|j| vals[j][alpha[j] as usize]).product();
                res[a] += c * c * phi;
                if let Some(jm) = jac.as_deref_mut() {
                    jm[(a, base + s)] = 2.0 * c * phi;
                    for j in 0..s {
                        let mut dphi = ders[j][alpha[j] as usize];
                        for l in (0..s).filter(|&l| l != j) {
                            dphi *= vals[l][alpha[l] as usize];
                        }
                        jm[(a, base + j)] = c * c * dphi;
                    }
                }
            }
        }
        res
    }

    /// One Levenberg-Marquardt run from a random start. Returns parameters and ||R||.
    fn solve(&self, rng: &mut ChaCha8Rng, opts: &DesignOptions) -> (Vec<f64>, f64) {
        let np = self.num_params();
        let m = self.alphas.len();
        let mut p = self.initial(rng);
        let mut jac = DMatrix::zeros(m, np);
        let mut res = self.residual(&p, Some(&mut jac));
        let mut norm = res.norm();
        let mut lambda = 1e-2;
        let mut checkpoint = norm;
        for it in 1..=opts.max_iter {
            if norm <= opts.polish_tol {
                break;
            }
            if it % STALL_WINDOW == 0 {
                if norm > opts.tol && norm > 0.99 * checkpoint {
                    break;
                }
                checkpoint = norm;
            }
            let mut accepted = false;
            while lambda <= 1e12 {
                let Some(step) = lm_step(&jac, &res, lambda) else {
                    lambda *= 4.0;
                    continue;
                };
                let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                self.project(&mut trial);
                let trial_res = self.residual(&trial, None);
                let trial_norm = trial_res.norm();
                if trial_norm.is_finite() && trial_norm < norm {
                    p = trial;
                    lambda = (lambda / 3.0).max(1e-15);
                    accepted = true;
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
            res = self.residual(&p, Some(&mut jac));
            norm = res.norm();
        }
        (p, norm)
    }
}

/// Damped Gauss-Newton step `-(J^T J + λD)^{-1} J^T R` with D the floored diagonal of J^T J.
/// Underdetermined systems use the Tikhonov dual form `-J^T (J J^T + λI)^{-1} R`.
fn lm_step(jac: &DMatrix<f64>, res: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let (m, np) = jac.shape();
    if m < np {
        let mut a = jac * jac.transpose();
        for i in 0..m {
            a[(i, i)] += lambda;
        }
        let y = a.cholesky()?.solve(res);
        Some(-(jac.transpose() * y))
    } else {
        let mut a = jac.transpose() * jac;
        let floor = a.diagonal().mean() * DAMPING_FLOOR;
        for i in 0..np {
            a[(i, i)] += lambda * a[(i, i)].max(floor).max(1e-12);
        }
        let g = jac.transpose() * res;
        Some(-a.cholesky()?.solve(&g))
    }
}

/// Designed factor with escalation: starts from `required_points(|S|, k)` and multiplies by
/// the escalation factor (rounded up) while the residual stays above tolerance.
pub fn designed_factor(
    dists: &[Distribution],
    inputs: &[usize],
    k: usize,
    opts: &DesignOptions,
) -> Result<FactorRule, (f64, usize)> {
    let sub: Vec<Distribution> = inputs.iter().map(|&i| dists[i]).collect();
    let r = 2 * k - 1;
    let requested = required_points_eta(inputs.len(), k, opts.eta);
    let mut n = requested;
    let mut best = (f64::INFINITY, n);
    for attempt in 0..=opts.max_escalations {
        let rule = designed_quadrature(&sub, r, n, opts, attempt).map_err(|_| best)?;
        if rule.residual < best.0 {
            best = (rule.residual, n);
        }
        if rule.feasible {
            log::debug!(
                "factor {inputs:?}: {n} points, residual {:.3e}, {attempt} escalations",
                rule.residual
            );
            return Ok(FactorRule {
                inputs: inputs.to_vec(),
                provenance: Provenance::Designed,
                k,
                nodes: rule.nodes,
                weights: rule.weights,
                residual: rule.residual,
                requested_points: requested,
                escalations: attempt,
            });
        }
        log::info!(
            "factor {inputs:?}: residual {:.3e} with {n} points, escalating",
            rule.residual
        );
        n = (n as f64 * opts.escalation_factor).ceil() as usize;
    }
    Err(best)
}

/// Partially tensor-structured rule: a Gauss rule for each singleton block and a designed
/// rule for each larger block, all at level k, composed as a cartesian product.
pub fn compose_partial(
    partition: &Partition,
    dists: &[Distribution],
    k: usize,
    opts: &DesignOptions,
) -> Result<QuadratureRule, QuadratureError> {
    check_level(k)?;
    if partition.dim() != dists.len() {
        return Err(QuadratureError::DimensionMismatch {
            expected: partition.dim(),
            got: dists.len(),
        });
    }
    for d in dists {
        d.validate()?;
    }
    let factors: Vec<Result<FactorRule, QuadratureError>> = partition
        .blocks()
        .par_iter()
        .enumerate()
        .map(|(m, block)| {
            if block.len() == 1 {
                gauss_factor(&dists[block[0]].family(), block[0], k)
            } else {
                designed_factor(dists, block, k, opts).map_err(|(best_residual, points)| {
                    QuadratureError::Infeasible {
                        factor: m,
                        inputs: block.clone(),
                        best_residual,
                        points,
                    }
                })
            }
        })
        .collect();
    let factors = factors.into_iter().collect::<Result<Vec<_>, _>>()?;
    QuadratureRule::from_factors(dists.to_vec(), partition.clone(), factors, k)
}
