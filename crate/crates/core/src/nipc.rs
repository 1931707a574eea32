//! Integration-based polynomial chaos: projection, moments, surrogate sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::PointSet;
use crate::orthopoly::{
    basis_indices, eval_basis_from_tables, BasisIndexSet, Distribution, PolyFamily,
};
use crate::quadrature::QuadratureRule;

pub const MIN_RISK_SAMPLES: usize = 10_000;
const SAMPLE_CHUNK: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NipcError {
    #[error("{got} outputs for a rule with {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("risk measures need at least {MIN_RISK_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("CVaR level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("points have {got} columns, model has {expected} inputs")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A truncated expansion in the orthonormal basis of the input distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceModel {
    pub basis: BasisIndexSet,
    pub coefficients: Vec<f64>,
    pub distributions: Vec<Distribution>,
    pub order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
}

/// `α_i = Σ_j w_j f(x_j) Φ_i(x_j)` over the rule's nodes, basis of total degree <= p.
pub fn project(outputs: &[f64], rule: &QuadratureRule, p: usize) -> Result<PceModel, NipcError> {
    if outputs.len() != rule.len() {
        return Err(NipcError::LengthMismatch {
            expected: rule.len(),
            got: outputs.len(),
        });
    }
    let fams = rule.families();
    let basis = basis_indices(rule.dim(), p);
    let mut coefficients = vec![0.0; basis.len()];
    let mut tables = vec![vec![0.0; p + 1]; fams.len()];
    for ((x, &w), &f) in rule
        .standardized_nodes()
        .rows()
        .zip(rule.weights())
        .zip(outputs)
    {
        for ((t, fam), &xj) in tables.iter_mut().zip(&fams).zip(x) {
            fam.eval_into(xj, t);
        }
        let wf = w * f;
        for (c, phi) in coefficients
            .iter_mut()
            .zip(eval_basis_from_tables(&basis, &tables))
        {
            *c += wf * phi;
        }
    }
    Ok(PceModel {
        basis,
        coefficients,
        distributions: rule.distributions().to_vec(),
        order: p,
    })
}

pub fn moments(m: &PceModel) -> Moments {
    let mean = m.coefficients.first().copied().unwrap_or(0.0);
    let variance: f64 = m.coefficients.iter().skip(1).map(|a| a * a).sum();
    Moments {
        mean,
        variance,
        std_dev: variance.sqrt(),
    }
}

impl PceModel {
    pub fn dim(&self) -> usize {
        self.distributions.len()
    }

    pub fn families(&self) -> Vec<PolyFamily> {
        self.distributions.iter().map(|d| d.family()).collect()
    }

    /// Evaluates the expansion at one point in standardized coordinates.
    pub fn eval_standard(&self, z: &[f64]) -> f64 {
        let fams = self.families();
        let mut tables = vec![vec![0.0; self.order + 1]; fams.len()];
        self.eval_standard_with(&fams, z, &mut tables)
    }

    fn eval_standard_with(&self, fams: &[PolyFamily], z: &[f64], tables: &mut [Vec<f64>]) -> f64 {
        for ((t, fam), &x) in tables.iter_mut().zip(fams).zip(z) {
            fam.eval_into(x, t);
        }
        self.coefficients
            .iter()
            .zip(eval_basis_from_tables(&self.basis, tables))
            .map(|(a, phi)| a * phi)
            .sum()
    }

    pub fn to_document(&self, rule_sha256: Option<String>) -> PceDocument {
        let m = moments(self);
        PceDocument {
            order: self.order,
            distributions: self.distributions.clone(),
            basis: self.basis.indices.clone(),
            coefficients: self.coefficients.clone(),
            mean: m.mean,
            variance: m.variance,
            std_dev: m.std_dev,
            provenance: Provenance { rule_sha256 },
        }
    }
}

/// PCE output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceDocument {
    pub order: usize,
    pub distributions: Vec<Distribution>,
    pub basis: Vec<Vec<u32>>,
    pub coefficients: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the serialized quadrature rule the coefficients came from.
    pub rule_sha256: Option<String>,
}

/// Surrogate values at physical points. Points outside the optimizer's clipping box
/// (e.g. beyond ten standard deviations) are evaluated anyway, with a warning.
pub fn surrogate_eval(m: &PceModel, points: &PointSet) -> Result<Vec<f64>, NipcError> {
    if !points.is_empty() && points.dim() != m.dim() {
        return Err(NipcError::DimensionMismatch {
            expected: m.dim(),
            got: points.dim(),
        });
    }
    let fams = m.families();
    let maps: Vec<_> = m.distributions.iter().map(|d| d.affine_map()).collect();
    let boxes: Vec<_> = fams.iter().map(|f| f.clip_box()).collect();
    let mut outside = 0usize;
    let mut tables = vec![vec![0.0; m.order + 1]; fams.len()];
    let mut z = vec![0.0; fams.len()];
    let values = points
        .rows()
        .map(|row| {
            for (j, (&u, map)) in row.iter().zip(&maps).enumerate() {
                z[j] = map.to_standard(u);
            }
            if z.iter().zip(&boxes).any(|(x, (lo, hi))| x < lo || x > hi) {
                outside += 1;
            }
            m.eval_standard_with(&fams, &z, &mut tables)
        })
        .collect();
    if outside > 0 {
        log::warn!("{outside} surrogate evaluation points lie outside the supported range");
    }
    Ok(values)
}

/// Standardized input samples for chunk `chunk` of a seed stream. Chunk c always holds
/// samples `c * 65536 ..` regardless of how chunks are scheduled.
pub(crate) fn standard_chunk(fams: &[PolyFamily], seed: u64, chunk: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    let mut out = Vec::with_capacity(len * fams.len());
    for _ in 0..len {
        for f in fams {
            out.push(f.sample_standard(&mut rng));
        }
    }
    out
}

pub(crate) fn chunks(samples: usize) -> Vec<(usize, usize)> {
    (0..samples)
        .step_by(SAMPLE_CHUNK)
        .enumerate()
        .map(|(c, s)| (c, (samples - s).min(SAMPLE_CHUNK)))
        .collect()
}

/// Physical input samples from the same stream used by [`risk_measures`].
pub fn sample_inputs(dists: &[Distribution], samples: usize, seed: u64) -> PointSet {
    let fams: Vec<PolyFamily> = dists.iter().map(|d| d.family()).collect();
    let maps: Vec<_> = dists.iter().map(|d| d.affine_map()).collect();
    let d = dists.len();
    let parts: Vec<Vec<f64>> = chunks(samples)
        .into_par_iter()
        .map(|(c, len)| {
            let mut z = standard_chunk(&fams, seed, c, len);
            for (i, v) in z.iter_mut().enumerate() {
                *v = maps[i % d].to_physical(*v);
            }
            z
        })
        .collect();
    PointSet::new(d, parts.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskMeasures {
    pub samples: usize,
    pub threshold: f64,
    /// P(f > threshold).
    pub failure_probability: f64,
    pub failure_probability_se: f64,
    pub cvar_level: f64,
    /// Value at risk: the `cvar_level` quantile.
    pub var: f64,
    /// Mean of the upper `1 - cvar_level` tail.
    pub cvar: f64,
    pub cvar_se: f64,
}

/// Plain Monte Carlo on the surrogate.
pub fn risk_measures(
    m: &PceModel,
    threshold: f64,
    cvar_level: f64,
    samples: usize,
    seed: u64,
) -> Result<RiskMeasures, NipcError> {
    if samples < MIN_RISK_SAMPLES {
        return Err(NipcError::TooFewSamples(samples));
    }
    if !(cvar_level > 0.0 && cvar_level < 1.0) {
        return Err(NipcError::InvalidLevel(cvar_level));
    }
    let fams = m.families();
    let d = fams.len();
    let parts: Vec<Vec<f64>> = chunks(samples)
        .into_par_iter()
        .map(|(c, len)| {
            let z = standard_chunk(&fams, seed, c, len);
            let mut tables = vec![vec![0.0; m.order + 1]; d];
            z.chunks_exact(d.max(1))
                .take(len)
                .map(|row| m.eval_standard_with(&fams, row, &mut tables))
                .collect()
        })
        .collect();
    let mut y = parts.concat();
    let n = y.len() as f64;
    let exceed = y.iter().filter(|&&v| v > threshold).count() as f64;
    let pf = exceed / n;

    y.sort_by(|a, b| a.total_cmp(b));
    let tail_start = ((cvar_level * n).floor() as usize).min(y.len() - 1);
    let var = y[tail_start];
    let tail = &y[tail_start..];
    let cvar = tail.iter().sum::<f64>() / tail.len() as f64;
    // asymptotic variance of the Rockafellar-Uryasev estimator
    let excess: Vec<f64> = y.iter().map(|v| (v - var).max(0.0)).collect();
    let em = excess.iter().sum::<f64>() / n;
    let ev = excess.iter().map(|e| (e - em).powi(2)).sum::<f64>() / (n - 1.0);
    let cvar_se = (ev / n).sqrt() / (1.0 - cvar_level);
    Ok(RiskMeasures {
        samples,
        threshold,
        failure_probability: pf,
        failure_probability_se: (pf * (1.0 - pf) / n).sqrt(),
        cvar_level,
        var,
        cvar,
        cvar_se,
    })
}
