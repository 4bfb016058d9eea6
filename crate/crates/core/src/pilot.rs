//! Pilot stage: a leaf-level bandwidth fit, per-point derivative estimates at
//! high-density points, and the adaptive penalty weights derived from them.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{KernelError, LooCv};
use crate::optim::{restart_search, OptimError, OptimizerConfig, SpredProblem, ALL_STRATEGIES};
use crate::rng::substream;
use crate::tree::AggregationTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PilotError {
    #[error("invalid pilot configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {min} samples, found {found}")]
    TooFewSamples { min: usize, found: usize },
    #[error("interior set is empty (fraction {fraction} of {n} points)")]
    EmptyInterior { fraction: f64, n: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("every interior point was dropped during derivative estimation")]
    NoUsablePoints,
    #[error("leaf-level bandwidth search failed: {0}")]
    OptimizationFailed(#[from] OptimError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMethod {
    /// Local linear regression.
    #[default]
    Llr,
    /// Local regression with linear and squared terms per coordinate.
    Lqr,
    /// Analytic derivative of the leaf-level Nadaraya-Watson fit.
    NwMl,
}

impl std::str::FromStr for DerivativeMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "llr" => Ok(Self::Llr),
            "lqr" => Ok(Self::Lqr),
            "nw_ml" | "nwml" => Ok(Self::NwMl),
            other => Err(format!("unknown derivative method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    #[default]
    L2,
}

impl Distance {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Distance::L1 => (a - b).abs(),
            Distance::L2 => (a - b) * (a - b),
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(format!("unknown distance `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotConfig {
    pub method: DerivativeMethod,
    pub oversmooth_exponent: f64,
    pub interior_fraction: f64,
    pub distance: Distance,
    /// Exponent on `n` in the first weight term; `None` means `1/(2(2+p))`.
    pub a2: Option<f64>,
    pub b: f64,
    pub restarts: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            method: DerivativeMethod::Llr,
            oversmooth_exponent: 0.75,
            interior_fraction: 0.10,
            distance: Distance::L2,
            a2: None,
            b: 1.0,
            restarts: 30,
        }
    }
}

impl PilotConfig {
    pub fn validate(&self) -> Result<(), PilotError> {
        let z = self.oversmooth_exponent;
        if !(z > 0.0 && z < 1.0) {
            return Err(PilotError::InvalidConfig(format!("oversmooth exponent must lie in (0, 1), got {z}")));
        }
        let f = self.interior_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(PilotError::InvalidConfig(format!("interior fraction must lie in (0, 1], got {f}")));
        }
        if let Some(a2) = self.a2 {
            if !(a2 > 0.0 && a2.is_finite()) {
                return Err(PilotError::InvalidConfig(format!("a2 must be positive, got {a2}")));
            }
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(PilotError::InvalidConfig(format!("b must be positive, got {}", self.b)));
        }
        if self.restarts == 0 {
            return Err(PilotError::InvalidConfig("restarts must be positive".into()));
        }
        Ok(())
    }

    pub fn a2_for(&self, p: usize) -> f64 {
        self.a2.unwrap_or(1.0 / (2.0 * (2.0 + p as f64)))
    }
}

/// Leaf-level bandwidth from an unpenalized multi-start search.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafMetric {
    pub gamma: Vec<f64>,
    pub loss: f64,
    pub converged: bool,
}

/// Minimizes the leave-one-out loss over leaf bandwidths with no penalty.
pub fn fit_leaf_metric(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    config: &PilotConfig,
    optimizer: &OptimizerConfig,
) -> Result<LeafMetric, PilotError> {
    config.validate()?;
    if x.nrows() < 3 {
        return Err(PilotError::TooFewSamples { min: 3, found: x.nrows() });
    }
    let cv = LooCv::new(x, y)?;
    let problem = SpredProblem::unpenalized(&cv);
    let opt = OptimizerConfig { seed: substream(optimizer.seed, "pilot", 0), ..*optimizer };
    let search = restart_search(&problem, config.restarts, &ALL_STRATEGIES, &opt)?;
    let best = &search.best().fit;
    Ok(LeafMetric { gamma: best.gamma.clone(), loss: best.loss, converged: best.converged })
}

/// Elementwise `γ^z`, which pulls every positive bandwidth toward one.
pub fn oversmooth(gamma: &[f64], z: f64) -> Vec<f64> {
    gamma.iter().map(|&g| if g == 0.0 { 0.0 } else { g.powf(z) }).collect()
}

fn kernel_weight(a: &[f64], b: &[f64], gamma: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), g) in a.iter().zip(b).zip(gamma) {
        if *g != 0.0 {
            s += g * (x - y) * (x - y);
        }
    }
    (-s).exp()
}

fn row(x: &ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    x.row(i).to_vec()
}

/// Indices of the `⌊fraction·n⌋` points with the largest kernel mass
/// `Σ_{j≠i} K(X_i, X_j)`, ties broken toward lower indices. Returned in
/// ascending index order.
pub fn interior_points(x: ArrayView2<'_, f64>, gamma: &[f64], fraction: f64) -> Result<Vec<usize>, PilotError> {
    let n = x.nrows();
    if gamma.len() != x.ncols() {
        return Err(PilotError::DimensionMismatch { expected: x.ncols(), found: gamma.len() });
    }
    let m = (fraction * n as f64).floor() as usize;
    if m == 0 {
        return Err(PilotError::EmptyInterior { fraction, n });
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&x, i)).collect();
    let mass: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| kernel_weight(&rows[i], &rows[j], gamma))
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut chosen = order[..m.min(n)].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-point leaf derivative estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotDerivatives {
    /// Sample size the estimates came from.
    pub n: usize,
    /// Interior points kept, ascending.
    pub interior: Vec<usize>,
    /// `beta[[k, v]]` estimates `∂_v m` at `X_{interior[k]}`.
    pub beta: Array2<f64>,
    /// Points whose local design needed a ridge term.
    pub ridged: Vec<usize>,
    /// Points dropped because every local weight vanished.
    pub dropped: Vec<usize>,
}

enum PointEstimate {
    Slopes(Vec<f64>, bool),
    Dropped,
}

fn solve_spd(mut g: DMatrix<f64>, h: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
    if let Some(ch) = g.clone().cholesky() {
        let sol = ch.solve(h);
        if sol.iter().all(|v| v.is_finite()) {
            return Some((sol, false));
        }
    }
    let q = g.nrows();
    let trace: f64 = (0..q).map(|k| g[(k, k)]).sum();
    let mut jitter = 1e-8 * trace / q as f64;
    if !(jitter > 0.0) {
        jitter = 1e-8;
    }
    for _ in 0..12 {
        for k in 0..q {
            g[(k, k)] += jitter;
        }
        if let Some(ch) = g.clone().cholesky() {
            let sol = ch.solve(h);
            if sol.iter().all(|v| v.is_finite()) {
                return Some((sol, true));
            }
        }
        jitter *= 10.0;
    }
    None
}

fn local_polynomial(rows: &[Vec<f64>], y: &[f64], i: usize, gamma: &[f64], quadratic: bool) -> PointEstimate {
    let p = gamma.len();
    let q = if quadratic { 2 * p + 1 } else { p + 1 };
    let mut g = DMatrix::<f64>::zeros(q, q);
    let mut h = DVector::<f64>::zeros(q);
    let mut z = vec![0.0; q];
    let mut total = 0.0;
    for (j, xj) in rows.iter().enumerate() {
        let k = kernel_weight(&rows[i], xj, gamma);
        if k == 0.0 {
            continue;
        }
        total += k;
        z[0] = 1.0;
        for v in 0..p {
            let d = xj[v] - rows[i][v];
            z[1 + v] = d;
            if quadratic {
                z[1 + p + v] = d * d;
            }
        }
        for a in 0..q {
            let ka = k * z[a];
            h[a] += ka * y[j];
            for b in a..q {
                g[(a, b)] += ka * z[b];
            }
        }
    }
    if !(total > 0.0) {
        return PointEstimate::Dropped;
    }
    for a in 0..q {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    match solve_spd(g, &h) {
        Some((sol, ridged)) => PointEstimate::Slopes(sol.as_slice()[1..=p].to_vec(), ridged),
        None => PointEstimate::Dropped,
    }
}

fn nw_derivative(rows: &[Vec<f64>], y: &[f64], i: usize, gamma: &[f64]) -> PointEstimate {
    let p = gamma.len();
    let weights: Vec<f64> = rows.iter().map(|xj| kernel_weight(&rows[i], xj, gamma)).collect();
    let den: f64 = weights.iter().sum();
    if !(den > 0.0) {
        return PointEstimate::Dropped;
    }
    let fit: f64 = weights.iter().zip(y).map(|(k, y)| k * y).sum::<f64>() / den;
    let mut slopes = vec![0.0; p];
    for (v, s) in slopes.iter_mut().enumerate() {
        if gamma[v] == 0.0 {
            continue;
        }
        let acc: f64 = rows
            .iter()
            .zip(&weights)
            .zip(y)
            .map(|((xj, k), yj)| k * (rows[i][v] - xj[v]) * (yj - fit))
            .sum();
        *s = -2.0 * gamma[v] * acc / den;
    }
    PointEstimate::Slopes(slopes, false)
}

/// Estimates `∂_v m(X_i)` for every `i` in `interior`, weighting all `n`
/// points by the Gaussian kernel with bandwidth `gamma`.
pub fn estimate_derivatives(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    gamma: &[f64],
    interior: &[usize],
    method: DerivativeMethod,
) -> Result<PilotDerivatives, PilotError> {
    let (n, p) = x.dim();
    if gamma.len() != p {
        return Err(PilotError::DimensionMismatch { expected: p, found: gamma.len() });
    }
    if y.len() != n {
        return Err(PilotError::DimensionMismatch { expected: n, found: y.len() });
    }
    if interior.is_empty() {
        return Err(PilotError::EmptyInterior { fraction: 0.0, n });
    }
    if let Some(&bad) = interior.iter().find(|&&i| i >= n) {
        return Err(PilotError::DimensionMismatch { expected: n, found: bad + 1 });
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&x, i)).collect();
    let estimates: Vec<PointEstimate> = interior
        .par_iter()
        .map(|&i| match method {
            DerivativeMethod::Llr => local_polynomial(&rows, y, i, gamma, false),
            DerivativeMethod::Lqr => local_polynomial(&rows, y, i, gamma, true),
            DerivativeMethod::NwMl => nw_derivative(&rows, y, i, gamma),
        })
        .collect();
    let mut kept = Vec::new();
    let mut ridged = Vec::new();
    let mut dropped = Vec::new();
    let mut values = Vec::new();
    for (&i, est) in interior.iter().zip(estimates) {
        match est {
            PointEstimate::Slopes(s, r) => {
                if r {
                    ridged.push(i);
                }
                kept.push(i);
                values.extend(s);
            }
            PointEstimate::Dropped => dropped.push(i),
        }
    }
    if !ridged.is_empty() {
        log::warn!("{} local designs needed a ridge term", ridged.len());
    }
    if !dropped.is_empty() {
        log::warn!("{} interior points dropped: no usable local weights", dropped.len());
    }
    if kept.is_empty() {
        return Err(PilotError::NoUsablePoints);
    }
    let beta = Array2::from_shape_vec((kept.len(), p), values).expect("shape matches");
    Ok(PilotDerivatives { n, interior: kept, beta, ridged, dropped })
}

/// Adaptive penalty weights with the terms they are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    /// `ŵ_v`; `+∞` holds the node out of the model.
    pub w: Vec<f64>,
    /// Within-node derivative spread (zero for leaves).
    pub c1: Vec<f64>,
    /// Derivative magnitude over the node's leaves.
    pub c2: Vec<f64>,
    /// Derivative gap to sibling leaves; NaN when the node has no siblings.
    pub c3: Vec<f64>,
}

fn inverse_power(c: f64, b: f64) -> f64 {
    if c == 0.0 { f64::INFINITY } else { c.powf(-b) }
}

/// Weight `ŵ_v = (n^{a2} C1)^b + C2^{-b} + C3^{-b}` for every tree node.
pub fn compute_weights(
    tree: &AggregationTree,
    derivs: &PilotDerivatives,
    config: &PilotConfig,
) -> Result<AdaptiveWeights, PilotError> {
    let p = tree.leaf_count();
    if derivs.beta.ncols() != p {
        return Err(PilotError::DimensionMismatch { expected: p, found: derivs.beta.ncols() });
    }
    let m = derivs.beta.nrows();
    if m == 0 {
        return Err(PilotError::NoUsablePoints);
    }
    let dist = config.distance;
    let beta = &derivs.beta;

    // Mean distance between leaf derivatives over the interior points, and to zero.
    let mut pair = vec![0.0; p * p];
    let mut magnitude = vec![0.0; p];
    for u in 0..p {
        magnitude[u] = beta.column(u).iter().map(|&b| dist.apply(b, 0.0)).sum::<f64>() / m as f64;
        for w in (u + 1)..p {
            let d = (0..m).map(|k| dist.apply(beta[[k, u]], beta[[k, w]])).sum::<f64>() / m as f64;
            pair[u * p + w] = d;
            pair[w * p + u] = d;
        }
    }

    let a2 = config.a2_for(p);
    let scale = (derivs.n as f64).powf(a2);
    let b = config.b;
    let rows: Vec<(f64, f64, f64, f64)> = (0..tree.node_count())
        .into_par_iter()
        .map(|v| {
            let leaves = tree.leaf_columns(v);
            let l = leaves.len();
            let c1 = if l < 2 {
                0.0
            } else {
                let mut s = 0.0;
                for (a, &u) in leaves.iter().enumerate() {
                    for &w in &leaves[a + 1..] {
                        s += pair[u * p + w];
                    }
                }
                s / (l * (l - 1) / 2) as f64
            };
            let c2 = leaves.iter().map(|&u| magnitude[u]).sum::<f64>() / l as f64;
            let sib_leaves: Vec<usize> = tree
                .siblings(v)
                .into_iter()
                .flat_map(|k| tree.leaf_columns(k).iter().copied())
                .collect();
            let c3 = if sib_leaves.is_empty() {
                f64::NAN
            } else {
                let mut s = 0.0;
                for &u in leaves {
                    for &w in &sib_leaves {
                        s += pair[u * p + w];
                    }
                }
                s / (l * sib_leaves.len()) as f64
            };
            let first = if c1 == 0.0 { 0.0 } else { (scale * c1).powf(b) };
            let third = if c3.is_nan() { 0.0 } else { inverse_power(c3, b) };
            (first + inverse_power(c2, b) + third, c1, c2, c3)
        })
        .collect();
    Ok(AdaptiveWeights {
        w: rows.iter().map(|r| r.0).collect(),
        c1: rows.iter().map(|r| r.1).collect(),
        c2: rows.iter().map(|r| r.2).collect(),
        c3: rows.iter().map(|r| r.3).collect(),
    })
}

/// Everything produced by the pilot stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotFit {
    /// Leaf bandwidths from the unpenalized search.
    pub gamma_leaf: Vec<f64>,
    /// Oversmoothed leaf bandwidths used for interior scoring and derivatives.
    pub gamma_pilot: Vec<f64>,
    pub leaf_loss: f64,
    pub derivatives: PilotDerivatives,
    pub weights: AdaptiveWeights,
}

/// Runs the full pilot stage on leaf-level covariates.
pub fn run_pilot(
    tree: &AggregationTree,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    config: &PilotConfig,
    optimizer: &OptimizerConfig,
) -> Result<PilotFit, PilotError> {
    if x.ncols() != tree.leaf_count() {
        return Err(PilotError::DimensionMismatch { expected: tree.leaf_count(), found: x.ncols() });
    }
    let leaf = fit_leaf_metric(x, y, config, optimizer)?;
    log::info!("leaf-level loss {:.6e}", leaf.loss);
    let gamma_pilot = oversmooth(&leaf.gamma, config.oversmooth_exponent);
    let interior = interior_points(x, &gamma_pilot, config.interior_fraction)?;
    let derivatives = estimate_derivatives(x, y, &gamma_pilot, &interior, config.method)?;
    let weights = compute_weights(tree, &derivatives, config)?;
    Ok(PilotFit { gamma_leaf: leaf.gamma, gamma_pilot, leaf_loss: leaf.loss, derivatives, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::fixtures::figure_one;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_derivs(values: &[f64], m: usize, n: usize) -> PilotDerivatives {
        let beta = Array2::from_shape_fn((m, values.len()), |(_, v)| values[v]);
        PilotDerivatives { n, interior: (0..m).collect(), beta, ridged: vec![], dropped: vec![] }
    }

    #[test]
    fn oversmoothing_examples() {
        assert_eq!(oversmooth(&[1.0, 0.0], 0.75), vec![1.0, 0.0]);
        assert_relative_eq!(oversmooth(&[16.0], 0.75)[0], 8.0, max_relative = 1e-14);
        let o = oversmooth(&[4.0, 0.25], 0.5);
        assert!(o[0] < 4.0 && o[1] > 0.25);
    }

    #[test]
    fn interior_set_size_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array2<f64> = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
        assert_eq!(interior_points(x.view(), &[1.0, 1.0], 0.1).unwrap().len(), 5);
        assert_eq!(interior_points(x.view(), &[0.0, 0.0], 0.1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(interior_points(x.view(), &[1.0, 1.0], 0.01), Err(PilotError::EmptyInterior { .. })));
    }

    #[test]
    fn interior_excludes_grid_ends() {
        for n in [20usize, 37, 80] {
            let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / (n - 1) as f64);
            let j = interior_points(x.view(), &[1.0], 0.1).unwrap();
            assert!(!j.contains(&0) && !j.contains(&(n - 1)));
        }
    }

    #[test]
    fn llr_recovers_linear_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Array2<f64> = Array2::from_shape_fn((40, 3), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..40).map(|i| 2.0 * x[[i, 0]] - x[[i, 1]]).collect();
        for method in [DerivativeMethod::Llr, DerivativeMethod::Lqr] {
            let d = estimate_derivatives(x.view(), &y, &[0.0; 3], &[0, 5, 9], method).unwrap();
            for k in 0..3 {
                assert!((d.beta[[k, 0]] - 2.0).abs() < 1e-8);
                assert!((d.beta[[k, 1]] + 1.0).abs() < 1e-8);
                assert!(d.beta[[k, 2]].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_response_has_zero_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Array2<f64> = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let y = vec![1.5; 30];
        for method in [DerivativeMethod::Llr, DerivativeMethod::Lqr, DerivativeMethod::NwMl] {
            let d = estimate_derivatives(x.view(), &y, &[2.0, 0.5], &[1, 2], method).unwrap();
            assert!(d.beta.iter().all(|b| b.abs() < 1e-10), "{method:?}");
        }
    }

    #[test]
    fn llr_matches_weighted_normal_equations() {
        // Independent oracle: 1-D weighted least squares in closed form.
        let n = 200;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] * x[[i, 0]]).collect();
        let i0 = (0..n).min_by(|&a, &b| (x[[a, 0]] - 0.5).abs().total_cmp(&(x[[b, 0]] - 0.5).abs())).unwrap();
        let mut previous = f64::INFINITY;
        for gamma in [10.0, 100.0, 1000.0] {
            let d = estimate_derivatives(x.view(), &y, &[gamma], &[i0], DerivativeMethod::Llr).unwrap();
            let xi = x[[i0, 0]];
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                let dx = x[[j, 0]] - xi;
                let k = (-gamma * dx * dx).exp();
                s0 += k;
                s1 += k * dx;
                s2 += k * dx * dx;
                t0 += k * y[j];
                t1 += k * dx * y[j];
            }
            let slope = (s0 * t1 - s1 * t0) / (s0 * s2 - s1 * s1);
            assert!((d.beta[[0, 0]] - slope).abs() < 1e-8);
            let err = (slope - 2.0 * xi).abs();
            assert!(err <= previous + 1e-12);
            previous = err;
        }
        assert!(previous < 1e-2);
    }

    #[test]
    fn nw_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Array2<f64> = Array2::from_shape_fn((25, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..25).map(|i| x[[i, 0]].sin() + x[[i, 1]]).collect();
        let gamma = [3.0, 1.5];
        let d = estimate_derivatives(x.view(), &y, &gamma, &[7], DerivativeMethod::NwMl).unwrap();
        let nw = |q: &[f64]| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..25 {
                let k = (-(0..2).map(|v| gamma[v] * (q[v] - x[[j, v]]).powi(2)).sum::<f64>()).exp();
                num += k * y[j];
                den += k;
            }
            num / den
        };
        for v in 0..2 {
            let mut a = vec![x[[7, 0]], x[[7, 1]]];
            let mut b = a.clone();
            a[v] += 1e-6;
            b[v] -= 1e-6;
            let fd = (nw(&a) - nw(&b)) / 2e-6;
            assert!((d.beta[[0, v]] - fd).abs() < 1e-6, "{} vs {fd}", d.beta[[0, v]]);
        }
    }

    #[test]
    fn figure_one_weights() {
        let tree = figure_one();
        let d = constant_derivs(&[1.0, 0.0, 0.0, 1.0, 1.0], 4, 100);
        let cfg = PilotConfig::default();
        let w = compute_weights(&tree, &d, &cfg).unwrap();
        let seven = tree.node("7").unwrap();
        assert_eq!((w.c1[seven], w.c2[seven], w.c3[seven]), (0.0, 1.0, 1.0));
        assert_eq!(w.w[seven], 2.0);
        let six = tree.node("6").unwrap();
        assert_eq!(w.c3[six], 0.0);
        assert_eq!(w.w[six], f64::INFINITY);
        let root = tree.node("8").unwrap();
        assert!(w.c3[root].is_nan());
        assert!(w.w[root].is_finite());
        for leaf in 0..5 {
            assert_eq!(w.c1[leaf], 0.0);
        }
    }

    #[test]
    fn zero_derivatives_give_infinite_weights() {
        let tree = figure_one();
        let d = constant_derivs(&[0.0; 5], 3, 50);
        let w = compute_weights(&tree, &d, &PilotConfig::default()).unwrap();
        assert!(w.w.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn category_four_node_has_smallest_weight() {
        // Node 6 (leaves 4, 5) under four derivative patterns.
        let tree = figure_one();
        let six = tree.node("6").unwrap();
        let cfg = PilotConfig::default();
        let weight = |vals: &[f64]| compute_weights(&tree, &constant_derivs(vals, 5, 200), &cfg).unwrap().w[six];
        let irrelevant = weight(&[1.0, 0.5, 0.2, 0.0, 0.0]);
        let unequal = weight(&[1.0, 0.5, 0.2, 2.0, 3.0]);
        let aggregated_higher = weight(&[2.0, 0.5, 0.2, 2.0, 2.0]);
        let target = weight(&[1.0, 0.5, 0.2, 2.0, 2.0]);
        assert!(target.is_finite());
        for other in [irrelevant, unequal, aggregated_higher] {
            assert!(target < other, "{target} vs {other}");
        }
    }

    #[test]
    fn leaf_metric_example_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Array2<f64> = Array2::from_shape_fn((60, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = PilotConfig { restarts: 3, ..Default::default() };
        let fit = fit_leaf_metric(x.view(), &y, &cfg, &OptimizerConfig::default()).unwrap();
        let cv = LooCv::new(x.view(), &y).unwrap();
        let at_zero = cv
            .loss(&[0.0, 0.0], crate::KernelKind::Gaussian, crate::kernel::ZeroDenominatorPolicy::Error)
            .unwrap()
            .loss;
        assert!(fit.loss <= at_zero + 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PilotConfig { oversmooth_exponent: 1.0, ..Default::default() }.validate().is_err());
        assert!(PilotConfig { interior_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(PilotConfig::default().validate().is_ok());
        assert_relative_eq!(PilotConfig::default().a2_for(5), 1.0 / 14.0);
    }

    fn arb_beta() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (2usize..7).prop_flat_map(|m| (prop::collection::vec(-3.0f64..3.0, m * 5), Just(m)))
    }

    proptest! {
        #[test]
        fn weights_ignore_point_order((vals, m) in arb_beta(), seed in 0u64..100) {
            let tree = figure_one();
            let beta = Array2::from_shape_vec((m, 5), vals).unwrap();
            let mut order: Vec<usize> = (0..m).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..m).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted = beta.select(ndarray::Axis(0), &order);
            for distance in [Distance::L1, Distance::L2] {
                let cfg = PilotConfig { distance, ..Default::default() };
                let a = compute_weights(&tree, &PilotDerivatives { n: 90, interior: (0..m).collect(), beta: beta.clone(), ridged: vec![], dropped: vec![] }, &cfg).unwrap();
                let b = compute_weights(&tree, &PilotDerivatives { n: 90, interior: order.clone(), beta: permuted.clone(), ridged: vec![], dropped: vec![] }, &cfg).unwrap();
                for v in 0..8 {
                    prop_assert!((a.w[v] - b.w[v]).abs() <= 1e-9 * a.w[v].abs().max(1.0) || a.w[v] == b.w[v]);
                }
            }
        }

        #[test]
        fn scaling_derivatives_scales_terms((vals, m) in arb_beta(), c in 0.1f64..10.0) {
            let tree = figure_one();
            let beta = Array2::from_shape_vec((m, 5), vals).unwrap();
            for (distance, power) in [(Distance::L1, 1), (Distance::L2, 2)] {
                let cfg = PilotConfig { distance, ..Default::default() };
                let mk = |b: Array2<f64>| PilotDerivatives { n: 90, interior: (0..m).collect(), beta: b, ridged: vec![], dropped: vec![] };
                let a = compute_weights(&tree, &mk(beta.clone()), &cfg).unwrap();
                let b = compute_weights(&tree, &mk(&beta * c), &cfg).unwrap();
                let f = c.powi(power);
                for v in 0..8 {
                    prop_assert!((b.c1[v] - f * a.c1[v]).abs() <= 1e-9 * (f * a.c1[v]).abs().max(1e-12));
                    prop_assert!((b.c2[v] - f * a.c2[v]).abs() <= 1e-9 * (f * a.c2[v]).abs().max(1e-12));
                    prop_assert_eq!(a.w[v].is_finite(), b.w[v].is_finite());
                }
            }
        }
    }
}
