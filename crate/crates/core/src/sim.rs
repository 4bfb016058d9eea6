//! Simulation benchmark: copula covariates on a full binary tree, three
//! response surfaces built from five aggregated groups, Nadaraya-Watson
//! baselines, and prediction/selection metrics.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{nw_predict_batch, Bandwidth, KernelError, KernelKind, LooCv, ZeroDenominatorPolicy};
use crate::model::{fit, FitError, KrTexasConfig};
use crate::optim::{restart_search, OptimError, OptimizerConfig, SpredProblem, ALL_STRATEGIES};
use crate::rng::{rng_for, substream};
use crate::tree::AggregationTree;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("p = {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("group S{group} ends at leaf {end}, beyond p = {p}")]
    IndexOutOfTree { group: usize, end: usize, p: usize },
    #[error("covariance matrix is not positive definite")]
    CholeskyFailed,
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Covariance {
    Identity,
    /// `Σ_ij = ρ^|i-j|`.
    Toeplitz { rho: f64 },
    /// Unit diagonal and `offdiag` on the first off-diagonals.
    Tridiagonal { offdiag: f64 },
}

impl Covariance {
    pub fn label(&self) -> &'static str {
        match self {
            Covariance::Identity => "id",
            Covariance::Toeplitz { .. } => "toeplitz",
            Covariance::Tridiagonal { .. } => "tridiag",
        }
    }

    pub fn matrix(&self, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| {
            let d = i.abs_diff(j);
            match *self {
                Covariance::Identity => f64::from(u8::from(d == 0)),
                Covariance::Toeplitz { rho } => rho.powi(d as i32),
                Covariance::Tridiagonal { offdiag } => match d {
                    0 => 1.0,
                    1 => offdiag,
                    _ => 0.0,
                },
            }
        })
    }
}

impl std::str::FromStr for Covariance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "id" | "identity" => Ok(Covariance::Identity),
            "toeplitz" => Ok(Covariance::Toeplitz { rho: 0.4 }),
            "tridiag" | "tridiagonal" => Ok(Covariance::Tridiagonal { offdiag: 0.4 }),
            other => Err(format!("unknown covariance `{other}` (expected id, toeplitz or tridiag)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Nonlinear1,
    Nonlinear2,
    Linear,
}

impl Setting {
    pub fn label(&self) -> &'static str {
        match self {
            Setting::Nonlinear1 => "nonlinear1",
            Setting::Nonlinear2 => "nonlinear2",
            Setting::Linear => "linear",
        }
    }

    /// Noiseless response from the five group sums.
    pub fn evaluate(&self, s: &[f64; 5]) -> f64 {
        let [s1, s2, s3, s4, s5] = *s;
        match self {
            Setting::Nonlinear1 => s1 * s1 + 5.0 * s2.cos() - s4 + 10.0 / (1.0 + s3 * s3) * s5 * s5,
            Setting::Nonlinear2 => s1.powi(3) + 5.0 * s2.sin() - 2.0 * s3 * s3 - s4 + 0.5 * s5.powi(5),
            Setting::Linear => 2.0 * s1 + 5.0 * s2 + s3 - 3.0 * s4 - 2.0 * s5,
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nonlinear1" => Ok(Setting::Nonlinear1),
            "nonlinear2" => Ok(Setting::Nonlinear2),
            "linear" => Ok(Setting::Linear),
            other => Err(format!("unknown setting `{other}` (expected nonlinear1, nonlinear2 or linear)")),
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `n` rows of `2Φ(Z) − 1` with `Z ~ N(0, Σ)`.
pub fn gen_covariates(n: usize, p: usize, covariance: &Covariance, seed: u64) -> Result<Array2<f64>, SimError> {
    let chol = covariance.matrix(p).cholesky().ok_or(SimError::CholeskyFailed)?;
    let l = chol.l();
    let mut rng = rng_for(seed, "covariates", 0);
    let mut x = Array2::zeros((n, p));
    let mut e = vec![0.0; p];
    for mut row in x.outer_iter_mut() {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..p {
            let z: f64 = (0..=i).map(|j| l[(i, j)] * e[j]).sum();
            row[i] = 2.0 * std_normal_cdf(z) - 1.0;
        }
    }
    Ok(x)
}

/// Complete binary tree over `p` leaves named `1..=p`; internal nodes are
/// numbered upward level by level, so the root is `2p − 1`.
pub fn build_full_binary_tree(p: usize) -> Result<AggregationTree, SimError> {
    if p < 2 || !p.is_power_of_two() {
        return Err(SimError::NotPowerOfTwo(p));
    }
    let mut parents: Vec<(String, Option<String>)> = Vec::with_capacity(2 * p - 1);
    let mut level: Vec<usize> = (1..=p).collect();
    let mut next = p + 1;
    let mut links: Vec<(usize, usize)> = Vec::new();
    while level.len() > 1 {
        let mut up = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            links.push((pair[0], next));
            links.push((pair[1], next));
            up.push(next);
            next += 1;
        }
        level = up;
    }
    let root = level[0];
    parents.push((root.to_string(), None));
    for (child, parent) in links {
        parents.push((child.to_string(), Some(parent.to_string())));
    }
    let leaves: Vec<String> = (1..=p).map(|i| i.to_string()).collect();
    Ok(AggregationTree::from_parent_list(&parents, &leaves)?)
}

impl From<crate::tree::TreeError> for SimError {
    fn from(e: crate::tree::TreeError) -> Self {
        SimError::Fit(FitError::Tree(e))
    }
}

/// Leaf columns (0-based, half-open) of the five groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub p: usize,
    pub groups: [(usize, usize); 5],
}

/// Reference layout on 128 leaves: `(start, length, alignment)`.
const REFERENCE_GROUPS: [(usize, usize, usize); 5] = [(0, 4, 4), (32, 2, 2), (64, 5, 4), (96, 1, 2), (97, 1, 1)];

impl GroupLayout {
    /// Scales the 128-leaf group positions to `p` leaves, keeping group sizes
    /// and the subtree alignment of each group's start, and pushing groups
    /// right as needed so they never overlap.
    pub fn for_leaves(p: usize) -> Result<Self, SimError> {
        let mut groups = [(0, 0); 5];
        let mut prev_end = 0;
        for (g, &(start, len, align)) in REFERENCE_GROUPS.iter().enumerate() {
            let scaled = (start as f64 * p as f64 / 128.0).round() as usize;
            let s = scaled.max(prev_end).next_multiple_of(align);
            let e = s + len;
            if e > p {
                return Err(SimError::IndexOutOfTree { group: g + 1, end: e, p });
            }
            groups[g] = (s, e);
            prev_end = e;
        }
        Ok(Self { p, groups })
    }

    /// Group sums `S_1..S_5` of one leaf-level row.
    pub fn sums(&self, row: &[f64]) -> [f64; 5] {
        let mut s = [0.0; 5];
        for (g, &(a, b)) in self.groups.iter().enumerate() {
            s[g] = row[a..b].iter().sum();
        }
        s
    }

    /// Group id (1..=5) of every leaf, 0 outside the groups.
    pub fn fingerprint(&self) -> Vec<usize> {
        let mut f = vec![0; self.p];
        for (g, &(a, b)) in self.groups.iter().enumerate() {
            f[a..b].iter_mut().for_each(|v| *v = g + 1);
        }
        f
    }

    /// The five group sums as columns.
    pub fn group_features(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), 5));
        for (i, row) in x.outer_iter().enumerate() {
            let r = row.to_vec();
            let s = self.sums(&r);
            for g in 0..5 {
                out[[i, g]] = s[g];
            }
        }
        out
    }
}

/// Nodes whose leaves share one nonzero derivative class and differ from at
/// least one sibling leaf. Sibling-free nodes only need the first condition.
pub fn target_set_from_fingerprint(tree: &AggregationTree, fingerprint: &[usize]) -> Vec<usize> {
    (0..tree.node_count())
        .filter(|&v| {
            let leaves = tree.leaf_columns(v);
            let id = fingerprint[leaves[0]];
            if id == 0 || leaves.iter().any(|&c| fingerprint[c] != id) {
                return false;
            }
            let sibs = tree.siblings(v);
            sibs.is_empty()
                || sibs.iter().any(|&k| tree.leaf_columns(k).iter().any(|&c| fingerprint[c] != id))
        })
        .collect()
}

/// Noiseless regression function and the node set it is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub setting: Setting,
    pub layout: GroupLayout,
    pub target_set: Vec<usize>,
}

impl GroundTruth {
    pub fn new(tree: &AggregationTree, setting: Setting) -> Result<Self, SimError> {
        let layout = GroupLayout::for_leaves(tree.leaf_count())?;
        let target_set = target_set_from_fingerprint(tree, &layout.fingerprint());
        Ok(Self { setting, layout, target_set })
    }

    pub fn conditional_mean(&self, row: &[f64]) -> f64 {
        self.setting.evaluate(&self.layout.sums(row))
    }

    pub fn conditional_means(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.outer_iter().map(|r| self.conditional_mean(&r.to_vec())).collect()
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Adds `N(0, (noise_scale · sd(mean))²)` noise to the noiseless means.
pub fn add_noise(mean: &[f64], noise_scale: f64, seed: u64) -> Vec<f64> {
    let sd = if mean.len() > 1 { noise_scale * sample_sd(mean) } else { 0.0 };
    if sd == 0.0 || !sd.is_finite() {
        return mean.to_vec();
    }
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let mut rng = rng_for(seed, "noise", 0);
    mean.iter().map(|m| m + normal.sample(&mut rng)).collect()
}

/// Responses for leaf-level covariates; returns `(y, conditional means)`.
pub fn gen_response(
    x: ArrayView2<'_, f64>,
    truth: &GroundTruth,
    noise_scale: f64,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mean = truth.conditional_means(x);
    (add_noise(&mean, noise_scale, seed), mean)
}

/// Confusion-matrix summaries over all tree nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub sn: f64,
    pub sp: f64,
    pub prec: f64,
    pub npv: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Empty denominators count as perfect (no claims made, none wrong).
pub fn selection_metrics(selected: &[usize], truth: &[usize], total: usize) -> SelectionMetrics {
    let mut sel = vec![false; total];
    let mut tru = vec![false; total];
    selected.iter().for_each(|&v| sel[v] = true);
    truth.iter().for_each(|&v| tru[v] = true);
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for v in 0..total {
        match (sel[v], tru[v]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    SelectionMetrics {
        sn: ratio(tp, tp + fn_),
        sp: ratio(tn, tn + fp),
        prec: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        tp,
        fp,
        tn,
        fn_,
    }
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    (s / pred.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Krtexas,
    Nw,
    NwAx,
    NwOracle,
    KrtexasOracle,
    Mean,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Krtexas => "krtexas",
            Method::Nw => "nw",
            Method::NwAx => "nw-ax",
            Method::NwOracle => "nw-oracle",
            Method::KrtexasOracle => "krtexas-oracle",
            Method::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "krtexas" => Ok(Method::Krtexas),
            "nw" => Ok(Method::Nw),
            "nw-ax" => Ok(Method::NwAx),
            "nw-oracle" => Ok(Method::NwOracle),
            "krtexas-oracle" => Ok(Method::KrtexasOracle),
            "mean" => Ok(Method::Mean),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Bandwidths searched by the isotropic baselines; `γ = 1/(2h²)`.
pub const BANDWIDTH_GRID: [f64; 15] =
    [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6];

pub fn isotropic_gamma(h: f64) -> f64 {
    1.0 / (2.0 * h * h)
}

/// Bandwidth from the grid with the lowest leave-one-out loss (first on ties).
pub fn select_isotropic_bandwidth(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<f64, SimError> {
    let cv = LooCv::new(x, y)?;
    let mut best = (f64::INFINITY, BANDWIDTH_GRID[0]);
    for &h in &BANDWIDTH_GRID {
        let g = vec![isotropic_gamma(h); x.ncols()];
        let loss = cv.loss(&g, KernelKind::Gaussian, ZeroDenominatorPolicy::MeanFallback)?.loss;
        if loss < best.0 {
            best = (loss, h);
        }
    }
    Ok(best.1)
}

fn nw_isotropic(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    x_test: ArrayView2<'_, f64>,
    h: f64,
) -> Result<Vec<f64>, SimError> {
    let bw = Bandwidth::isotropic(x.ncols(), isotropic_gamma(h))?;
    Ok(nw_predict_batch(x_test, x, y, &bw, KernelKind::Gaussian)?.values)
}

/// One simulated training/test draw.
#[derive(Debug, Clone)]
pub struct SimData {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub mean: Vec<f64>,
    pub x_test: Array2<f64>,
    pub mean_test: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub covariance: Covariance,
    pub setting: Setting,
    pub noise_scale: f64,
    pub n_test: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub krtexas: KrTexasConfig,
    /// Random restarts for the oracle bandwidth search.
    pub oracle_restarts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            p: 128,
            covariance: Covariance::Identity,
            setting: Setting::Nonlinear1,
            noise_scale: 0.01,
            n_test: 1000,
            replicates: 1,
            seed: 0,
            methods: vec![Method::Krtexas, Method::Nw, Method::NwAx, Method::NwOracle, Method::KrtexasOracle],
            krtexas: KrTexasConfig::default(),
            oracle_restarts: 30,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 3 || self.n_test == 0 || self.replicates == 0 {
            return Err(SimError::InvalidConfig("need n >= 3, n_test >= 1 and replicates >= 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(SimError::InvalidConfig(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.oracle_restarts == 0 {
            return Err(SimError::InvalidConfig("oracle restarts must be positive".into()));
        }
        if !self.p.is_power_of_two() || self.p < 2 {
            return Err(SimError::NotPowerOfTwo(self.p));
        }
        GroupLayout::for_leaves(self.p)?;
        Ok(())
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        substream(self.seed, "replicate", replicate as u64)
    }
}

/// Training and test data for one replicate.
pub fn generate(config: &SimConfig, truth: &GroundTruth, replicate: usize) -> Result<SimData, SimError> {
    let seed = config.replicate_seed(replicate);
    let x = gen_covariates(config.n, config.p, &config.covariance, substream(seed, "train", 0))?;
    let (y, mean) = gen_response(x.view(), truth, config.noise_scale, substream(seed, "train", 1));
    let x_test = gen_covariates(config.n_test, config.p, &config.covariance, substream(seed, "test", 0))?;
    let mean_test = truth.conditional_means(x_test.view());
    Ok(SimData { x, y, mean, x_test, mean_test })
}

/// One line of the metrics table. Selection columns are NaN for methods that
/// do not select nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub setting: String,
    pub covariance: String,
    pub n: usize,
    pub replicate: usize,
    pub rmse: f64,
    pub sn: f64,
    pub sp: f64,
    pub prec: f64,
    pub npv: f64,
}

/// Evaluates every configured method on one replicate.
pub fn run_replicate(
    config: &SimConfig,
    tree: &AggregationTree,
    truth: &GroundTruth,
    replicate: usize,
) -> Result<Vec<MetricsRow>, SimError> {
    let data = generate(config, truth, replicate)?;
    let seed = config.replicate_seed(replicate);
    let row = |method: Method, pred: &[f64], sel: Option<SelectionMetrics>| MetricsRow {
        method: method.label().to_string(),
        setting: config.setting.label().to_string(),
        covariance: config.covariance.label().to_string(),
        n: config.n,
        replicate,
        rmse: rmse(pred, &data.mean_test),
        sn: sel.map_or(f64::NAN, |s| s.sn),
        sp: sel.map_or(f64::NAN, |s| s.sp),
        prec: sel.map_or(f64::NAN, |s| s.prec),
        npv: sel.map_or(f64::NAN, |s| s.npv),
    };
    let mut rows = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let r = match method {
            Method::Mean => {
                let m = data.y.iter().sum::<f64>() / data.y.len() as f64;
                row(method, &vec![m; config.n_test], None)
            }
            Method::Nw => {
                let h = select_isotropic_bandwidth(data.x.view(), &data.y)?;
                row(method, &nw_isotropic(data.x.view(), &data.y, data.x_test.view(), h)?, None)
            }
            Method::NwAx => {
                let xa = tree.aggregate(data.x.view())?;
                let qa = tree.aggregate(data.x_test.view())?;
                let h = select_isotropic_bandwidth(xa.view(), &data.y)?;
                row(method, &nw_isotropic(xa.view(), &data.y, qa.view(), h)?, None)
            }
            Method::NwOracle => {
                let xs = truth.layout.group_features(data.x.view());
                let qs = truth.layout.group_features(data.x_test.view());
                let h = (config.n as f64).powf(-1.0 / (4.0 + xs.ncols() as f64));
                row(method, &nw_isotropic(xs.view(), &data.y, qs.view(), h)?, None)
            }
            Method::KrtexasOracle => {
                let xs = truth.layout.group_features(data.x.view());
                let qs = truth.layout.group_features(data.x_test.view());
                let cv = LooCv::new(xs.view(), &data.y)?;
                let problem = SpredProblem::unpenalized(&cv);
                let opt = OptimizerConfig { seed: substream(seed, "oracle", 0), ..config.krtexas.optimizer };
                let search = restart_search(&problem, config.oracle_restarts, &ALL_STRATEGIES, &opt)?;
                let bw = Bandwidth::new(search.best().fit.gamma.clone())?;
                let pred = nw_predict_batch(qs.view(), xs.view(), &data.y, &bw, KernelKind::Gaussian)?;
                row(method, &pred.values, None)
            }
            Method::Krtexas => {
                let cfg = config.krtexas.clone().with_seed(substream(seed, "krtexas", 0));
                let model = fit(tree, data.x.view(), &data.y, &cfg)?;
                let pred = model.predict(data.x_test.view())?;
                let sel = selection_metrics(&model.fit.selected, &truth.target_set, tree.node_count());
                row(method, &pred.values, Some(sel))
            }
        };
        log::info!("replicate {replicate} {}: rmse {:.4}", r.method, r.rmse);
        rows.push(r);
    }
    Ok(rows)
}

/// Results of a full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub rows: Vec<MetricsRow>,
    pub layout: GroupLayout,
    /// Names of the target-set nodes.
    pub target_set: Vec<String>,
}

pub fn run_experiment(config: &SimConfig) -> Result<Experiment, SimError> {
    config.validate()?;
    let tree = build_full_binary_tree(config.p)?;
    let truth = GroundTruth::new(&tree, config.setting)?;
    let per_rep: Vec<Result<Vec<MetricsRow>, SimError>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, &tree, &truth, r))
        .collect();
    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    Ok(Experiment {
        rows,
        target_set: truth.target_set.iter().map(|&v| tree.name(v).to_string()).collect(),
        layout: truth.layout,
    })
}

/// Leaf-column blocks as 1-based inclusive leaf ranges, for reports.
pub fn describe_layout(layout: &GroupLayout) -> Vec<String> {
    layout
        .groups
        .iter()
        .enumerate()
        .map(|(g, &(a, b))| {
            if b - a == 1 { format!("S{}: leaf {}", g + 1, a + 1) } else { format!("S{}: leaves {}-{}", g + 1, a + 1, b) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::fixtures::figure_one;
    use std::collections::BTreeSet;

    #[test]
    fn uniform_marginals() {
        let n = 10_000;
        let x = gen_covariates(n, 3, &Covariance::Identity, 1).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1.0));
        for col in x.columns() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            assert!(m.abs() < 3.0 * (1.0 / 3f64.sqrt()) / (n as f64).sqrt());
            assert!((var - 1.0 / 3.0).abs() < 0.1 / 3.0);
        }
    }

    #[test]
    fn tridiagonal_adjacent_correlation() {
        let n = 10_000;
        let x = gen_covariates(n, 4, &Covariance::Tridiagonal { offdiag: 0.4 }, 2).unwrap();
        let corr = |a: usize, b: usize| {
            let (ca, cb) = (x.column(a), x.column(b));
            let (ma, mb) = (ca.sum() / n as f64, cb.sum() / n as f64);
            let cov: f64 = ca.iter().zip(cb.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum();
            let va: f64 = ca.iter().map(|u| (u - ma).powi(2)).sum();
            let vb: f64 = cb.iter().map(|v| (v - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        for j in 0..3 {
            let r = corr(j, j + 1);
            assert!((0.25..=0.50).contains(&r), "{r}");
        }
        assert!(corr(0, 2).abs() < 0.05);
        assert!(gen_covariates(5, 3, &Covariance::Tridiagonal { offdiag: 0.9 }, 0).is_err());
    }

    #[test]
    fn covariates_are_seeded() {
        let a = gen_covariates(5, 4, &Covariance::Toeplitz { rho: 0.4 }, 3).unwrap();
        let b = gen_covariates(5, 4, &Covariance::Toeplitz { rho: 0.4 }, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_covariates(5, 4, &Covariance::Toeplitz { rho: 0.4 }, 4).unwrap());
    }

    #[test]
    fn binary_trees() {
        let t = build_full_binary_tree(128).unwrap();
        assert_eq!(t.node_count(), 255);
        let t = build_full_binary_tree(2).unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.roots(), vec![2]);
        let t = build_full_binary_tree(8).unwrap();
        assert_eq!(t.node_count(), 15);
        let root = t.node("15").unwrap();
        assert_eq!(t.leaf_columns(root), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(t.leaf_columns(t.node("9").unwrap()), &[0, 1]);
        assert_eq!(t.leaf_columns(t.node("13").unwrap()), &[0, 1, 2, 3]);
        assert!(matches!(build_full_binary_tree(12), Err(SimError::NotPowerOfTwo(12))));
    }

    #[test]
    fn layouts() {
        let l = GroupLayout::for_leaves(128).unwrap();
        assert_eq!(l.groups, [(0, 4), (32, 34), (64, 69), (96, 97), (97, 98)]);
        let l = GroupLayout::for_leaves(16).unwrap();
        assert_eq!(l.groups, [(0, 4), (4, 6), (8, 13), (14, 15), (15, 16)]);
        assert!(matches!(GroupLayout::for_leaves(8), Err(SimError::IndexOutOfTree { .. })));
    }

    #[test]
    fn setting_examples() {
        assert_eq!(Setting::Linear.evaluate(&[1.0; 5]), 3.0);
        assert_eq!(Setting::Nonlinear1.evaluate(&[0.0; 5]), 5.0);
        assert_eq!(Setting::Nonlinear2.evaluate(&[0.0; 5]), 0.0);
    }

    #[test]
    fn zero_noise_returns_means() {
        let tree = build_full_binary_tree(16).unwrap();
        let truth = GroundTruth::new(&tree, Setting::Nonlinear2).unwrap();
        let x = gen_covariates(20, 16, &Covariance::Identity, 0).unwrap();
        let (y, m) = gen_response(x.view(), &truth, 0.0, 1);
        assert_eq!(y, m);
        let (y2, _) = gen_response(x.view(), &truth, 0.01, 1);
        assert_ne!(y2, m);
        assert_eq!(y2, gen_response(x.view(), &truth, 0.01, 1).0);
    }

    /// Independent oracle: a node qualifies if its leaf set equals a maximal
    /// run of one group that is a subtree and whose sibling holds another class.
    fn brute_force_targets(tree: &AggregationTree, fp: &[usize]) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for v in 0..tree.node_count() {
            let leaves: BTreeSet<usize> = tree.leaf_columns(v).iter().copied().collect();
            let classes: BTreeSet<usize> = leaves.iter().map(|&c| fp[c]).collect();
            if classes.len() != 1 || classes.contains(&0) {
                continue;
            }
            let all_sib: BTreeSet<usize> = tree.siblings(v).iter().flat_map(|&k| tree.leaf_columns(k).to_vec()).collect();
            let sib_classes: BTreeSet<usize> = all_sib.iter().map(|&c| fp[c]).collect();
            if all_sib.is_empty() || sib_classes.iter().any(|c| !classes.contains(c)) {
                out.insert(v);
            }
        }
        out
    }

    #[test]
    fn target_sets() {
        let tree = build_full_binary_tree(16).unwrap();
        let truth = GroundTruth::new(&tree, Setting::Nonlinear2).unwrap();
        let names: Vec<&str> = truth.target_set.iter().map(|&v| tree.name(v)).collect();
        // Leaves 1-4, leaves 5-6, leaves 9-12, leaf 13, leaf 15, leaf 16.
        assert_eq!(names.len(), 6);
        let covers: Vec<Vec<usize>> = truth.target_set.iter().map(|&v| tree.leaf_columns(v).to_vec()).collect();
        assert!(covers.contains(&vec![0, 1, 2, 3]));
        assert!(covers.contains(&vec![4, 5]));
        assert!(covers.contains(&vec![8, 9, 10, 11]));
        assert!(covers.contains(&vec![12]));
        assert!(covers.contains(&vec![14]));
        assert!(covers.contains(&vec![15]));
        let fp = truth.layout.fingerprint();
        assert_eq!(truth.target_set.iter().copied().collect::<BTreeSet<_>>(), brute_force_targets(&tree, &fp));
        // No ancestor of a returned node also has a single nonzero class.
        for &v in &truth.target_set {
            for a in tree.ancestors(v) {
                let ids: BTreeSet<usize> = tree.leaf_columns(a).iter().map(|&c| fp[c]).collect();
                assert!(ids.len() > 1 || ids.contains(&0));
            }
        }

        let t128 = build_full_binary_tree(128).unwrap();
        let truth = GroundTruth::new(&t128, Setting::Linear).unwrap();
        let s2 = truth.target_set.iter().find(|&&v| tree_cols(&t128, v) == vec![32, 33]);
        assert!(s2.is_some());

        let p8 = build_full_binary_tree(8).unwrap();
        let mut fp = vec![0; 8];
        fp[..4].iter_mut().for_each(|v| *v = 1);
        let ts = target_set_from_fingerprint(&p8, &fp);
        assert_eq!(ts, vec![p8.node("13").unwrap()]);
        let ts = target_set_from_fingerprint(&p8, &[1; 8]);
        assert_eq!(ts, vec![p8.node("15").unwrap()]);
        let fig = figure_one();
        let ts = target_set_from_fingerprint(&fig, &[1, 0, 0, 1, 1]);
        assert_eq!(ts, vec![fig.node("7").unwrap()]);
    }

    fn tree_cols(t: &AggregationTree, v: usize) -> Vec<usize> {
        t.leaf_columns(v).to_vec()
    }

    #[test]
    fn metric_conventions() {
        let m = selection_metrics(&[1, 2], &[1, 2], 10);
        assert_eq!((m.sn, m.sp, m.prec, m.npv), (1.0, 1.0, 1.0, 1.0));
        let m = selection_metrics(&[], &[1, 2, 3], 10);
        assert_eq!((m.sn, m.sp, m.prec), (0.0, 1.0, 1.0));
        assert!((m.npv - 7.0 / 10.0).abs() < 1e-15);
        assert_eq!(m.tp + m.fp + m.tn + m.fn_, 10);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn isotropic_grid_convention() {
        assert_eq!(isotropic_gamma(1.0), 0.5);
        assert_eq!(BANDWIDTH_GRID.len(), 15);
    }
}
