//! Orthonormal polynomial families for the supported input distributions.
//!
//! Every distribution is mapped affinely onto a standard variable whose density is the
//! weight of a classical family:
//!
//! | distribution     | standard variable         | family               |
//! |------------------|---------------------------|----------------------|
//! | normal(μ, σ)     | z = (u − μ)/σ             | Hermite (He)         |
//! | uniform(a, b)    | z = (2u − a − b)/(b − a)  | Legendre             |
//! | exponential(λ)   | z = λu                    | Laguerre             |
//! | beta(α, β)       | z = 2u − 1                | Jacobi               |
//! | gamma(k, θ)      | z = u/θ                   | generalized Laguerre |
//!
//! Polynomials are normalized against the probability measure, so `<p_i, p_j> = δ_ij`.
//! Three-term recurrences are stored in monic form
//! `p_{j+1}(x) = (x − a_j) p_j(x) − b_j p_{j−1}(x)` with `b_0 = 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Beta, Distribution as _, Exp, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrthoError {
    #[error("invalid {family} parameters: {reason}")]
    InvalidParameters {
        family: &'static str,
        reason: &'static str,
    },
    #[error("Gauss rule construction failed for {family} with k = {k}")]
    RuleFailure { family: &'static str, k: usize },
    #[error("quadrature size must be at least 1")]
    ZeroPoints,
}

/// A random input's distribution in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Normal { mean: f64, std: f64 },
    Uniform { lower: f64, upper: f64 },
    Exponential { rate: f64 },
    Beta { alpha: f64, beta: f64 },
    Gamma { shape: f64, scale: f64 },
}

/// `physical = shift + scale * standard`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub shift: f64,
    pub scale: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        shift: 0.0,
        scale: 1.0,
    };

    pub fn to_physical(&self, z: f64) -> f64 {
        self.shift + self.scale * z
    }

    pub fn to_standard(&self, u: f64) -> f64 {
        (u - self.shift) / self.scale
    }
}

/// Classical family of the standard variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum PolyFamily {
    /// Probabilists' Hermite, standard normal weight.
    Hermite,
    /// Uniform weight on [−1, 1].
    Legendre,
    /// Weight e^{−x} on [0, ∞).
    Laguerre,
    /// Weight ∝ (1 − x)^a (1 + x)^b on [−1, 1], a, b > −1.
    Jacobi { a: f64, b: f64 },
    /// Weight ∝ x^alpha e^{−x} on [0, ∞), alpha > −1.
    GeneralizedLaguerre { alpha: f64 },
}

impl Distribution {
    pub fn family_name(&self) -> &'static str {
        match self {
            Distribution::Normal { .. } => "normal",
            Distribution::Uniform { .. } => "uniform",
            Distribution::Exponential { .. } => "exponential",
            Distribution::Beta { .. } => "beta",
            Distribution::Gamma { .. } => "gamma",
        }
    }

    pub fn validate(&self) -> Result<(), OrthoError> {
        let bad = |reason| {
            Err(OrthoError::InvalidParameters {
                family: self.family_name(),
                reason,
            })
        };
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match *self {
            Distribution::Normal { mean, std } => {
                if !finite(&[mean, std]) || std <= 0.0 {
                    return bad("need finite mean and std > 0");
                }
            }
            Distribution::Uniform { lower, upper } => {
                if !finite(&[lower, upper]) || lower >= upper {
                    return bad("need finite lower < upper");
                }
            }
            Distribution::Exponential { rate } => {
                if !rate.is_finite() || rate <= 0.0 {
                    return bad("need rate > 0");
                }
            }
            Distribution::Beta { alpha, beta } => {
                if !finite(&[alpha, beta]) || alpha <= 0.0 || beta <= 0.0 {
                    return bad("need alpha > 0 and beta > 0");
                }
            }
            Distribution::Gamma { shape, scale } => {
                if !finite(&[shape, scale]) || shape <= 0.0 || scale <= 0.0 {
                    return bad("need shape > 0 and scale > 0");
                }
            }
        }
        Ok(())
    }

    /// Affine map to the standard variable and its polynomial family.
    pub fn standardize(&self) -> Result<(AffineMap, PolyFamily), OrthoError> {
        self.validate()?;
        Ok(match *self {
            Distribution::Normal { mean, std } => (
                AffineMap {
                    shift: mean,
                    scale: std,
                },
                PolyFamily::Hermite,
            ),
            Distribution::Uniform { lower, upper } => (
                AffineMap {
                    shift: 0.5 * (lower + upper),
                    scale: 0.5 * (upper - lower),
                },
                PolyFamily::Legendre,
            ),
            Distribution::Exponential { rate } => (
                AffineMap {
                    shift: 0.0,
                    scale: 1.0 / rate,
                },
                PolyFamily::Laguerre,
            ),
            Distribution::Beta { alpha, beta } => (
                AffineMap {
                    shift: 0.5,
                    scale: 0.5,
                },
                PolyFamily::Jacobi {
                    a: beta - 1.0,
                    b: alpha - 1.0,
                },
            ),
            Distribution::Gamma { shape, scale } => (
                AffineMap { shift: 0.0, scale },
                PolyFamily::GeneralizedLaguerre { alpha: shape - 1.0 },
            ),
        })
    }

    pub fn affine_map(&self) -> AffineMap {
        self.standardize().expect("validated distribution").0
    }

    pub fn family(&self) -> PolyFamily {
        self.standardize().expect("validated distribution").1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let map = self.affine_map();
        map.to_physical(self.family().sample_standard(rng))
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Normal { mean, .. } => mean,
            Distribution::Uniform { lower, upper } => 0.5 * (lower + upper),
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Beta { alpha, beta } => alpha / (alpha + beta),
            Distribution::Gamma { shape, scale } => shape * scale,
        }
    }
}

impl PolyFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PolyFamily::Hermite => "hermite",
            PolyFamily::Legendre => "legendre",
            PolyFamily::Laguerre => "laguerre",
            PolyFamily::Jacobi { .. } => "jacobi",
            PolyFamily::GeneralizedLaguerre { .. } => "generalized_laguerre",
        }
    }

    /// Monic recurrence coefficients `(a_j, b_j)`, with `b_0 = 1` (total probability mass).
    pub fn recurrence(&self, j: usize) -> (f64, f64) {
        let jf = j as f64;
        match *self {
            PolyFamily::Hermite => (0.0, if j == 0 { 1.0 } else { jf }),
            PolyFamily::Legendre => (
                0.0,
                if j == 0 {
                    1.0
                } else {
                    jf * jf / (4.0 * jf * jf - 1.0)
                },
            ),
            PolyFamily::Laguerre => (2.0 * jf + 1.0, if j == 0 { 1.0 } else { jf * jf }),
            PolyFamily::GeneralizedLaguerre { alpha } => (
                2.0 * jf + alpha + 1.0,
                if j == 0 { 1.0 } else { jf * (jf + alpha) },
            ),
            PolyFamily::Jacobi { a, b } => {
                let s = 2.0 * jf + a + b;
                let aj = if j == 0 {
                    (b - a) / (a + b + 2.0)
                } else {
                    (b * b - a * a) / (s * (s + 2.0))
                };
                let bj = match j {
                    0 => 1.0,
                    1 => 4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + a + b).powi(2) * (3.0 + a + b)),
                    _ => {
                        4.0 * jf * (jf + a) * (jf + b) * (jf + a + b)
                            / (s * s * (s + 1.0) * (s - 1.0))
                    }
                };
                (aj, bj)
            }
        }
    }

    /// Support of the standard variable.
    pub fn support(&self) -> (f64, f64) {
        match self {
            PolyFamily::Hermite => (f64::NEG_INFINITY, f64::INFINITY),
            PolyFamily::Legendre | PolyFamily::Jacobi { .. } => (-1.0, 1.0),
            PolyFamily::Laguerre | PolyFamily::GeneralizedLaguerre { .. } => (0.0, f64::INFINITY),
        }
    }

    /// Finite box used to clip optimizer nodes: ±10 for the normal, [0, 40] for the
    /// half-line families (widened for gamma shapes whose bulk lies beyond 40).
    pub fn clip_box(&self) -> (f64, f64) {
        match *self {
            PolyFamily::Hermite => (-10.0, 10.0),
            PolyFamily::Legendre | PolyFamily::Jacobi { .. } => (-1.0, 1.0),
            PolyFamily::Laguerre => (0.0, 40.0),
            PolyFamily::GeneralizedLaguerre { alpha } => {
                let k = alpha + 1.0;
                (0.0, 40f64.max(k + 10.0 * k.sqrt()))
            }
        }
    }

    /// Values of the orthonormal polynomials of degree `0..=deg` at `x`.
    pub fn eval(&self, deg: usize, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; deg + 1];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        out[0] = 1.0;
        let mut prev = 0.0;
        let mut sqrt_b_prev = 0.0;
        for j in 0..out.len() - 1 {
            let (a, _) = self.recurrence(j);
            let sqrt_b_next = self.recurrence(j + 1).1.sqrt();
            let next = ((x - a) * out[j] - sqrt_b_prev * prev) / sqrt_b_next;
            prev = out[j];
            out[j + 1] = next;
            sqrt_b_prev = sqrt_b_next;
        }
    }

    /// Values and first derivatives of the orthonormal polynomials of degree `0..=deg`.
    pub fn eval_with_derivative(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) {
        debug_assert_eq!(vals.len(), ders.len());
        if vals.is_empty() {
            return;
        }
        vals[0] = 1.0;
        ders[0] = 0.0;
        let (mut pv, mut pd) = (0.0, 0.0);
        let mut sqrt_b_prev = 0.0;
        for j in 0..vals.len() - 1 {
            let (a, _) = self.recurrence(j);
            let sqrt_b_next = self.recurrence(j + 1).1.sqrt();
            let v = ((x - a) * vals[j] - sqrt_b_prev * pv) / sqrt_b_next;
            let d = (vals[j] + (x - a) * ders[j] - sqrt_b_prev * pd) / sqrt_b_next;
            pv = vals[j];
            pd = ders[j];
            vals[j + 1] = v;
            ders[j + 1] = d;
            sqrt_b_prev = sqrt_b_next;
        }
    }

    /// Draws a standard variable from this family's weight.
    pub fn sample_standard<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PolyFamily::Hermite => Normal::new(0.0, 1.0).unwrap().sample(rng),
            PolyFamily::Legendre => Uniform::new_inclusive(-1.0, 1.0).unwrap().sample(rng),
            PolyFamily::Laguerre => Exp::new(1.0).unwrap().sample(rng),
            PolyFamily::GeneralizedLaguerre { alpha } => {
                Gamma::new(alpha + 1.0, 1.0).unwrap().sample(rng)
            }
            PolyFamily::Jacobi { a, b } => {
                // u ~ Beta(b + 1, a + 1) on [0, 1]
                2.0 * Beta::new(b + 1.0, a + 1.0).unwrap().sample(rng) - 1.0
            }
        }
    }
}

/// One-dimensional rule in standard coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// k-point Gauss rule of `fam`: nodes are eigenvalues of the Jacobi matrix (polished by
/// Newton steps on p_k), weights are `1 / Σ_{j<k} p_j(x)^2`, i.e. the squared first
/// components of the normalized eigenvectors.
pub fn gauss_rule_1d(fam: &PolyFamily, k: usize) -> Result<Rule1d, OrthoError> {
    if k == 0 {
        return Err(OrthoError::ZeroPoints);
    }
    let fail = || OrthoError::RuleFailure {
        family: fam.name(),
        k,
    };
    let jacobi = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            fam.recurrence(r).0
        } else if r == c + 1 {
            fam.recurrence(r).1.sqrt()
        } else if c == r + 1 {
            fam.recurrence(c).1.sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::try_new(jacobi, f64::EPSILON, 0).ok_or_else(fail)?;
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    let mut vals = vec![0.0; k + 1];
    let mut ders = vec![0.0; k + 1];
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            fam.eval_with_derivative(*x, &mut vals, &mut ders);
            if ders[k] == 0.0 {
                break;
            }
            let step = vals[k] / ders[k];
            if !step.is_finite() {
                break;
            }
            *x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    let weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            fam.eval_into(x, &mut vals[..k]);
            1.0 / vals[..k].iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    if nodes.iter().chain(&weights).any(|v| !v.is_finite()) || weights.iter().any(|&w| w <= 0.0) {
        return Err(fail());
    }
    Ok(Rule1d { nodes, weights })
}

/// Weights solving the moment system `Σ_i p_j(x_i) w_i = δ_{j0}`, `j = 0..k−1`.
pub fn moment_system_weights(fam: &PolyFamily, nodes: &[f64]) -> Result<Vec<f64>, OrthoError> {
    let k = nodes.len();
    if k == 0 {
        return Err(OrthoError::ZeroPoints);
    }
    let cols: Vec<Vec<f64>> = nodes.iter().map(|&x| fam.eval(k - 1, x)).collect();
    let a = DMatrix::from_fn(k, k, |j, i| cols[i][j]);
    let mut rhs = DVector::zeros(k);
    rhs[0] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(OrthoError::RuleFailure {
        family: fam.name(),
        k,
    })?;
    Ok(sol.iter().copied().collect())
}

/// Total-degree multi-index set in graded order; within a degree the first coordinate
/// varies slowest and descends (d = 2: 00, 10, 01, 20, 11, 02, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisIndexSet {
    pub dim: usize,
    pub order: usize,
    pub indices: Vec<Vec<u32>>,
}

impl BasisIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Highest univariate degree appearing in the set.
    pub fn max_degree(&self) -> usize {
        self.order
    }
}

pub fn basis_indices(d: usize, p: usize) -> BasisIndexSet {
    let mut indices = Vec::new();
    let mut current = vec![0u32; d];
    for total in 0..=p {
        push_compositions(&mut indices, &mut current, 0, total as u32);
    }
    BasisIndexSet {
        dim: d,
        order: p,
        indices,
    }
}

fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, remaining: u32) {
    let d = cur.len();
    if d == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if pos == d - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v;
        push_compositions(out, cur, pos + 1, remaining - v);
    }
}

/// Binomial coefficient C(n, k) with exact integer arithmetic.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Φ_α at one point in standard coordinates, for every α of the set.
pub fn eval_basis(indices: &BasisIndexSet, fams: &[PolyFamily], point: &[f64]) -> Vec<f64> {
    let uni: Vec<Vec<f64>> = fams
        .iter()
        .zip(point)
        .map(|(f, &x)| f.eval(indices.max_degree(), x))
        .collect();
    eval_basis_from_tables(indices, &uni)
}

/// Same as [`eval_basis`] given precomputed univariate values `uni[j][deg]`.
pub fn eval_basis_from_tables(indices: &BasisIndexSet, uni: &[Vec<f64>]) -> Vec<f64> {
    indices
        .indices
        .iter()
        .map(|alpha| {
            alpha
                .iter()
                .zip(uni)
                .map(|(&a, vals)| vals[a as usize])
                .product()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn families() -> Vec<PolyFamily> {
        vec![
            PolyFamily::Hermite,
            PolyFamily::Legendre,
            PolyFamily::Laguerre,
            PolyFamily::Jacobi { a: 1.5, b: 0.5 },
            PolyFamily::GeneralizedLaguerre { alpha: 2.0 },
        ]
    }

    #[test]
    fn standardization() {
        let (m, f) = Distribution::Normal {
            mean: 90.0,
            std: 10.0,
        }
        .standardize()
        .unwrap();
        assert_eq!(f, PolyFamily::Hermite);
        assert_eq!(m.to_standard(100.0), 1.0);

        let (m, f) = Distribution::Uniform {
            lower: -1.0,
            upper: 1.0,
        }
        .standardize()
        .unwrap();
        assert_eq!(f, PolyFamily::Legendre);
        assert_eq!(m, AffineMap::IDENTITY);

        let (m, _) = Distribution::Uniform {
            lower: 30.0,
            upper: 35.0,
        }
        .standardize()
        .unwrap();
        for u in [30.0, 31.7, 35.0] {
            assert_abs_diff_eq!(m.to_standard(u), (2.0 * u - 65.0) / 5.0, epsilon = 1e-15);
        }

        assert!(Distribution::Normal {
            mean: 0.0,
            std: 0.0
        }
        .standardize()
        .is_err());
        assert!(Distribution::Beta {
            alpha: -1.0,
            beta: 2.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn small_rules() {
        let r = gauss_rule_1d(&PolyFamily::Legendre, 1).unwrap();
        assert_abs_diff_eq!(r.nodes[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.weights[0], 1.0, epsilon = 1e-15);

        let r = gauss_rule_1d(&PolyFamily::Hermite, 2).unwrap();
        assert_abs_diff_eq!(r.nodes[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.nodes[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[1], 0.5, epsilon = 1e-14);

        let r = gauss_rule_1d(&PolyFamily::Legendre, 2).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert_abs_diff_eq!(r.nodes[0], -s, epsilon = 1e-14);
        assert_abs_diff_eq!(r.nodes[1], s, epsilon = 1e-14);
        assert_abs_diff_eq!(r.weights[0], 0.5, epsilon = 1e-14);

        assert_eq!(
            gauss_rule_1d(&PolyFamily::Legendre, 0),
            Err(OrthoError::ZeroPoints)
        );
    }

    #[test]
    fn hermite_he2_matches_monic_form() {
        // He_2(x) = x^2 - 1, orthonormal version divides by sqrt(2)
        let v = PolyFamily::Hermite.eval(2, 1.3);
        assert_abs_diff_eq!(v[1], 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], (1.3f64 * 1.3 - 1.0) / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for fam in families() {
            let (x, h) = (0.37, 1e-6);
            let mut v = vec![0.0; 6];
            let mut d = vec![0.0; 6];
            fam.eval_with_derivative(x, &mut v, &mut d);
            let vp = fam.eval(5, x + h);
            let vm = fam.eval(5, x - h);
            for j in 0..6 {
                let fd = (vp[j] - vm[j]) / (2.0 * h);
                assert!((fd - d[j]).abs() < 1e-6 * (1.0 + d[j].abs()), "{fam:?} {j}");
                assert_abs_diff_eq!(v[j], fam.eval(5, x)[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn discrete_orthonormality() {
        for fam in families() {
            for k in 1..=8 {
                let r = gauss_rule_1d(&fam, k).unwrap();
                let tables: Vec<Vec<f64>> = r.nodes.iter().map(|&x| fam.eval(k, x)).collect();
                for a in 0..k {
                    for b in 0..k {
                        let s: f64 = r
                            .weights
                            .iter()
                            .zip(&tables)
                            .map(|(w, t)| w * t[a] * t[b])
                            .sum();
                        let expected = if a == b { 1.0 } else { 0.0 };
                        assert!(
                            (s - expected).abs() < 1e-9,
                            "{fam:?} k={k} a={a} b={b}: {s}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reference_rule_orthonormality() {
        // 200-point rule of the same family as the integration reference
        for fam in [
            PolyFamily::Hermite,
            PolyFamily::Legendre,
            PolyFamily::Jacobi { a: 0.5, b: -0.5 },
        ] {
            let r = gauss_rule_1d(&fam, 200).unwrap();
            let tables: Vec<Vec<f64>> = r.nodes.iter().map(|&x| fam.eval(6, x)).collect();
            for a in 0..=6 {
                for b in 0..=6 {
                    let s: f64 = r
                        .weights
                        .iter()
                        .zip(&tables)
                        .map(|(w, t)| w * t[a] * t[b])
                        .sum();
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((s - expected).abs() < 1e-10, "{fam:?} a={a} b={b}: {s}");
                }
            }
        }
    }

    #[test]
    fn moment_system_agrees_with_eigen_route() {
        for fam in families() {
            for k in 1..=8 {
                let r = gauss_rule_1d(&fam, k).unwrap();
                let w = moment_system_weights(&fam, &r.nodes).unwrap();
                for (a, b) in w.iter().zip(&r.weights) {
                    assert!((a - b).abs() < 1e-10, "{fam:?} k={k}: {a} vs {b}");
                }
                assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_order_and_size() {
        let b = basis_indices(2, 2);
        assert_eq!(
            b.indices,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
        assert_eq!(basis_indices(1, 0).indices, vec![vec![0]]);
        assert_eq!(basis_indices(4, 3).len(), 35);
        for d in 1..=8u64 {
            for p in 0..=6u64 {
                let b = basis_indices(d as usize, p as usize);
                assert_eq!(b.len() as u64, binomial(d + p, p));
                assert!(b.indices[0].iter().all(|&a| a == 0));
            }
        }
    }

    #[test]
    fn basis_products() {
        let b = basis_indices(2, 2);
        let fams = [PolyFamily::Legendre, PolyFamily::Hermite];
        let (x, z) = (0.4, -0.8);
        let v = eval_basis(&b, &fams, &[x, z]);
        assert_eq!(v[0], 1.0);
        // orthonormal degree-1 Legendre is sqrt(3) x
        assert_abs_diff_eq!(v[4], 3f64.sqrt() * x * z, epsilon = 1e-15);
        let h = eval_basis(&basis_indices(1, 1), &[PolyFamily::Hermite], &[1.3]);
        assert_abs_diff_eq!(h[1], 1.3, epsilon = 1e-15);
    }
}
