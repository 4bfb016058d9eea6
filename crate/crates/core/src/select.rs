//! Cross-validated choice of the penalty level and restart budget, the final
//! full-data fit, and support/importance extraction.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{nw_predict_batch, Bandwidth, KernelError, KernelKind, LooCv, ZeroDenominatorPolicy};
use crate::optim::{
    restart_search, strategy_for, InitStrategy, OptimError, OptimizerConfig, SpredFit, SpredProblem, SpredState,
    ALL_STRATEGIES,
};
use crate::rng::{rng_for, substream};
use crate::tree::AggregationTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("need at least {min} samples for {min}-fold cross-validation, found {found}")]
    TooFewSamples { min: usize, found: usize },
    #[error("invalid selection configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("every cross-validation cell failed")]
    AllCellsFailed,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// How the penalty grid is built. Values are always traversed in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaGrid {
    /// Log-spaced from ten times the smallest level at which the all-zero
    /// bandwidth is stationary down to `ratio` times the top value. The
    /// headroom keeps other local minima from winning at the top level.
    Auto { nlambda: usize, ratio: f64 },
    /// Log-spaced between the given ends.
    Range { min: f64, max: f64, nlambda: usize },
    Explicit { values: Vec<f64> },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { nlambda: 10, ratio: 1e-5 }
    }
}

const AUTO_HEADROOM: f64 = 10.0;

fn log_spaced(max: f64, min: f64, count: usize) -> Vec<f64> {
    if count == 1 || max == min {
        return vec![max];
    }
    let (a, b) = (max.ln(), min.ln());
    let mut out: Vec<f64> = (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect();
    out[0] = max;
    out[count - 1] = min;
    out
}

impl LambdaGrid {
    /// Descending grid values. `lambda_max` feeds the automatic grid.
    pub fn resolve(&self, lambda_max: f64) -> Result<Vec<f64>, SelectError> {
        let mut values = match self {
            LambdaGrid::Auto { nlambda, ratio } => {
                if *nlambda == 0 || !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(SelectError::InvalidConfig("auto grid needs nlambda >= 1 and ratio in (0, 1]".into()));
                }
                let top = AUTO_HEADROOM * lambda_max;
                log_spaced(top, top * ratio, *nlambda)
            }
            LambdaGrid::Range { min, max, nlambda } => {
                if *nlambda == 0 || !(*min > 0.0) || !(max >= min) || !max.is_finite() {
                    return Err(SelectError::InvalidConfig("range grid needs 0 < min <= max and nlambda >= 1".into()));
                }
                log_spaced(*max, *min, *nlambda)
            }
            LambdaGrid::Explicit { values } => {
                if values.is_empty() || values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(SelectError::InvalidConfig("explicit grid needs finite values >= 0".into()));
                }
                values.clone()
            }
        };
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub nfolds: usize,
    pub lambda_grid: LambdaGrid,
    /// Random restarts per cross-validation cell and for the final fit.
    pub restarts: usize,
    /// Restart budgets compared by cross-validation; `None` means
    /// `{⌈R/3⌉, ⌈2R/3⌉, R}`.
    pub budgets: Option<Vec<usize>>,
    pub warm_start: bool,
    pub max_attempts_stage_3: usize,
    pub strategies: Vec<InitStrategy>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            nfolds: 5,
            lambda_grid: LambdaGrid::default(),
            restarts: 30,
            budgets: None,
            warm_start: true,
            max_attempts_stage_3: 10,
            strategies: ALL_STRATEGIES.to_vec(),
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.nfolds < 2 {
            return Err(SelectError::InvalidConfig(format!("nfolds must be >= 2, got {}", self.nfolds)));
        }
        if self.restarts == 0 {
            return Err(SelectError::InvalidConfig("restarts must be positive".into()));
        }
        if self.strategies.is_empty() {
            return Err(SelectError::InvalidConfig("at least one init strategy is required".into()));
        }
        if let Some(b) = &self.budgets {
            if b.is_empty() || b.iter().any(|&m| m == 0 || m > self.restarts) {
                return Err(SelectError::InvalidConfig("budgets must lie in 1..=restarts".into()));
            }
        }
        Ok(())
    }

    /// Sorted, deduplicated restart budgets.
    pub fn resolved_budgets(&self) -> Vec<usize> {
        let r = self.restarts;
        let mut b = self.budgets.clone().unwrap_or_else(|| vec![r.div_ceil(3), (2 * r).div_ceil(3), r]);
        b.sort_unstable();
        b.dedup();
        b
    }
}

/// Test-index sets of a K-fold split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub test: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut in_test = vec![false; self.n];
        for &i in &self.test[fold] {
            in_test[i] = true;
        }
        (0..self.n).filter(|&i| !in_test[i]).collect()
    }
}

/// Random K-fold split with sizes differing by at most one; the first
/// `n mod K` folds get the extra point.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan, SelectError> {
    if k < 2 {
        return Err(SelectError::InvalidConfig(format!("nfolds must be >= 2, got {k}")));
    }
    if n < k {
        return Err(SelectError::TooFewSamples { min: k, found: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, "folds", 0));
    let (base, extra) = (n / k, n % k);
    let mut test = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut idx = perm[start..start + size].to_vec();
        idx.sort_unstable();
        test.push(idx);
        start += size;
    }
    Ok(FoldPlan { n, test })
}

/// Smallest `λ` with `λ · min_v ŵ_v >= max_v |∂L/∂γ_v (0)|` over finite weights;
/// at and above it the all-zero bandwidth satisfies the stationarity condition.
pub fn lambda_max(loocv: &LooCv, weights: &[f64]) -> Result<f64, SelectError> {
    let free: Vec<bool> = weights.iter().map(|w| w.is_finite()).collect();
    let min_w = weights.iter().copied().filter(|w| w.is_finite()).fold(f64::INFINITY, f64::min);
    if !min_w.is_finite() {
        return Ok(1.0);
    }
    let report = loocv.loss_and_gradient(&vec![0.0; weights.len()], Some(&free), ZeroDenominatorPolicy::Error)?;
    let gmax = report.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if gmax == 0.0 {
        return Ok(1.0);
    }
    if min_w == 0.0 {
        // A zero weight leaves that coordinate unpenalized at every level.
        return Ok(gmax);
    }
    Ok(gmax / min_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub lambda: f64,
    pub budget: usize,
    /// Held-out squared error summed over all folds; `inf` if a fold failed.
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub lambda_star: f64,
    pub m_star: usize,
    pub grid: Vec<f64>,
    pub budgets: Vec<usize>,
    pub table: Vec<CvCell>,
    /// Whether every fold's best fit at the largest `λ` was all zero.
    pub grid_adequate: bool,
}

struct ChainFit {
    fit: Option<SpredFit>,
}

fn chain_fill(
    strategy: InitStrategy,
    n: usize,
    dim: usize,
    seed: u64,
    fold: usize,
    chain: usize,
) -> (SpredState, Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(substream(seed, "cv-fold", fold as u64), "restart", chain as u64);
    let init = SpredState::random(strategy, n, dim, &mut rng);
    let fill_u = InitStrategy::Smallest.draw(n, dim, &mut rng);
    let fill_w = InitStrategy::Smallest.draw(n, dim, &mut rng);
    (init, fill_u, fill_w)
}

/// K-fold selection of `(λ*, m*)`.
///
/// For every fold, `R` chains walk the grid from the largest `λ` down. Chain
/// `r` starts from its own random draw at the first level and, with warm
/// starts on, from the fold-average of its previous-level solutions after
/// that; coordinates that are zero in the average are reseeded only where the
/// stationarity condition fails. A budget `m` scores, per level and fold, the lowest-objective fit
/// among chains `0..m` on held-out squared error.
pub fn cv_select(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: &[f64],
    config: &SelectConfig,
    optimizer: &OptimizerConfig,
) -> Result<CvSelection, SelectError> {
    config.validate()?;
    let (n, t) = x.dim();
    if weights.len() != t {
        return Err(SelectError::DimensionMismatch { expected: t, found: weights.len() });
    }
    if y.len() != n {
        return Err(SelectError::DimensionMismatch { expected: n, found: y.len() });
    }
    let seed = optimizer.seed;
    let full = LooCv::new(x, y)?;
    let grid = config.lambda_grid.resolve(lambda_max(&full, weights)?)?;
    let budgets = config.resolved_budgets();
    let plan = make_folds(n, config.nfolds, seed)?;
    let k = config.nfolds;
    let r = config.restarts;

    let trains: Vec<Vec<usize>> = (0..k).map(|f| plan.train(f)).collect();
    let fold_cv: Vec<LooCv> = trains.iter().map(|tr| full.subset(tr)).collect::<Result<_, _>>()?;
    let x_train: Vec<Array2<f64>> = trains.iter().map(|tr| x.select(Axis(0), tr)).collect();
    let y_train: Vec<Vec<f64>> = trains.iter().map(|tr| tr.iter().map(|&i| y[i]).collect()).collect();
    let x_test: Vec<Array2<f64>> = plan.test.iter().map(|te| x.select(Axis(0), te)).collect();
    let y_test: Vec<Vec<f64>> = plan.test.iter().map(|te| te.iter().map(|&i| y[i]).collect()).collect();

    let starts: Vec<Vec<(SpredState, Vec<f64>, Vec<f64>)>> = (0..k)
        .map(|f| {
            (0..r)
                .map(|c| chain_fill(strategy_for(&config.strategies, c), fold_cv[f].n(), t, seed, f, c))
                .collect()
        })
        .collect();

    let mut table = Vec::with_capacity(grid.len() * budgets.len());
    let mut previous: Option<Vec<Vec<ChainFit>>> = None;
    let mut grid_adequate = true;
    for (level, &lambda) in grid.iter().enumerate() {
        // Per-chain warm start: average over folds of the previous level's fits.
        let warm: Option<Vec<Option<Vec<f64>>>> = match (&previous, config.warm_start) {
            (Some(prev), true) => Some(
                (0..r)
                    .map(|c| {
                        let fits: Vec<&SpredFit> = (0..k).filter_map(|f| prev[f][c].fit.as_ref()).collect();
                        if fits.is_empty() {
                            return None;
                        }
                        let mut avg = vec![0.0; t];
                        for fit in &fits {
                            for (a, g) in avg.iter_mut().zip(&fit.gamma) {
                                *a += g;
                            }
                        }
                        avg.iter_mut().for_each(|a| *a /= fits.len() as f64);
                        Some(avg)
                    })
                    .collect(),
            ),
            _ => None,
        };
        let cells: Vec<(usize, usize)> = (0..k).flat_map(|f| (0..r).map(move |c| (f, c))).collect();
        let fits: Vec<ChainFit> = cells
            .par_iter()
            .map(|&(f, c)| {
                let problem = match SpredProblem::new(&fold_cv[f], lambda, weights) {
                    Ok(p) => p,
                    Err(_) => return ChainFit { fit: None },
                };
                let (init, fill_u, fill_w) = &starts[f][c];
                let start = match warm.as_ref().and_then(|w| w[c].as_ref()) {
                    Some(avg) => match kkt_violations(&fold_cv[f], avg, lambda, weights) {
                        Ok(reseed) => SpredState::warm(avg, &reseed, fill_u, fill_w),
                        Err(e) => {
                            log::debug!("fold {f} chain {c}: warm start unusable: {e}");
                            init.clone()
                        }
                    },
                    None => init.clone(),
                };
                let cfg = OptimizerConfig { seed: substream(seed, "cv", (f * r + c) as u64), ..*optimizer };
                match problem.minimize(&start, &cfg) {
                    Ok(fit) if fit.objective.is_finite() => ChainFit { fit: Some(fit) },
                    Ok(_) => ChainFit { fit: None },
                    Err(e) => {
                        log::debug!("fold {f} chain {c} at lambda {lambda:.4e} failed: {e}");
                        ChainFit { fit: None }
                    }
                }
            })
            .collect();
        let mut by_fold: Vec<Vec<ChainFit>> = Vec::with_capacity(k);
        let mut it = fits.into_iter();
        for _ in 0..k {
            by_fold.push(it.by_ref().take(r).collect());
        }

        for &m in &budgets {
            let mut sse = 0.0;
            for f in 0..k {
                let best = by_fold[f][..m]
                    .iter()
                    .filter_map(|c| c.fit.as_ref())
                    .fold(None::<&SpredFit>, |b, fit| match b {
                        Some(b) if b.objective <= fit.objective => Some(b),
                        _ => Some(fit),
                    });
                match best {
                    None => {
                        sse = f64::INFINITY;
                        break;
                    }
                    Some(fit) => {
                        if level == 0 && m == *budgets.last().unwrap() && fit.gamma.iter().any(|&g| g > 0.0) {
                            grid_adequate = false;
                        }
                        sse += held_out_sse(&x_train[f], &y_train[f], &x_test[f], &y_test[f], &fit.gamma)?;
                    }
                }
            }
            log::debug!("lambda {lambda:.4e} budget {m}: sse {sse:.6e}");
            table.push(CvCell { lambda, budget: m, sse });
        }
        previous = Some(by_fold);
    }
    if !grid_adequate {
        log::warn!("fits at the largest lambda are not all zero; consider a larger grid maximum");
    }

    let best = pick_cell(&table).ok_or(SelectError::AllCellsFailed)?;
    Ok(CvSelection { lambda_star: best.lambda, m_star: best.budget, grid, budgets, table, grid_adequate })
}

/// Zero coordinates of `gamma` at which the weighted-L1 stationarity
/// condition `∂L/∂γ_v + λ ŵ_v >= 0` fails, i.e. where moving away from zero
/// lowers the penalized objective.
pub fn kkt_violations(loocv: &LooCv, gamma: &[f64], lambda: f64, weights: &[f64]) -> Result<Vec<bool>, SelectError> {
    let zero: Vec<bool> = gamma.iter().zip(weights).map(|(g, w)| *g == 0.0 && w.is_finite()).collect();
    if !zero.iter().any(|&z| z) {
        return Ok(zero);
    }
    let report = loocv.loss_and_gradient(gamma, Some(&zero), ZeroDenominatorPolicy::MeanFallback)?;
    Ok((0..gamma.len()).map(|v| zero[v] && report.gradient[v] + lambda * weights[v] < 0.0).collect())
}

/// Lowest SSE; ties go to the larger `λ`, then the smaller budget.
pub fn pick_cell(table: &[CvCell]) -> Option<CvCell> {
    let mut best: Option<CvCell> = None;
    for &c in table.iter().filter(|c| c.sse.is_finite()) {
        best = match best {
            None => Some(c),
            Some(b) => {
                let better = c.sse < b.sse
                    || (c.sse == b.sse && (c.lambda > b.lambda || (c.lambda == b.lambda && c.budget < b.budget)));
                Some(if better { c } else { b })
            }
        };
    }
    best
}

fn held_out_sse(
    x_train: &Array2<f64>,
    y_train: &[f64],
    x_test: &Array2<f64>,
    y_test: &[f64],
    gamma: &[f64],
) -> Result<f64, SelectError> {
    let bw = Bandwidth::new(gamma.to_vec())?;
    let pred = nw_predict_batch(x_test.view(), x_train.view(), y_train, &bw, KernelKind::Gaussian)?;
    Ok(pred.values.iter().zip(y_test).map(|(p, y)| (y - p) * (y - p)).sum())
}

/// Diagnostics of the final fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub restart_objectives: Vec<f64>,
    pub restart_converged: Vec<bool>,
    pub converged: bool,
    /// Extra searches launched for restarts that had not converged.
    pub retries: usize,
    /// Nodes held at zero by an infinite weight.
    pub pinned: Vec<usize>,
    pub fallback_points: Vec<usize>,
    pub grid_adequate: bool,
    pub nestedness_violations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub node: usize,
    pub score: f64,
}

/// Outcome of the penalized fit at a chosen `(λ, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalFit {
    pub gamma_hat: Vec<f64>,
    pub lambda: f64,
    pub budget: usize,
    pub objective: f64,
    pub loss: f64,
    /// Nodes with `γ̂_v > 0`, ascending.
    pub selected: Vec<usize>,
    /// Selected nodes ranked by `γ̂_v · Var(X̃_v)`, largest first.
    pub importance: Vec<Importance>,
    pub diagnostics: FitDiagnostics,
}

fn sample_variance(col: ndarray::ArrayView1<'_, f64>) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.sum() / n as f64;
    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

/// `γ̂_v · Var(X̃_v)` for every selected node, sorted descending (ties by node).
pub fn importance_scores(x: ArrayView2<'_, f64>, gamma: &[f64]) -> Vec<Importance> {
    let mut scores: Vec<Importance> = gamma
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > 0.0)
        .map(|(v, &g)| Importance { node: v, score: g * sample_variance(x.column(v)) })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
    scores
}

/// Full-data restart search at `(λ, m)`; restarts that stop without converging
/// are rerun from fresh draws up to `max_attempts_stage_3` times.
pub fn final_fit(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    budget: usize,
    config: &SelectConfig,
    optimizer: &OptimizerConfig,
) -> Result<FinalFit, SelectError> {
    config.validate()?;
    let cv = LooCv::new(x, y)?;
    let problem = SpredProblem::new(&cv, lambda, weights)?;
    let seed = substream(optimizer.seed, "final", 0);
    let cfg = OptimizerConfig { seed, ..*optimizer };
    let mut search = restart_search(&problem, budget.max(1), &config.strategies, &cfg)?;

    let mut retries = 0;
    for outcome in search.outcomes.iter_mut() {
        let mut attempt = 0;
        while !outcome.fit.converged && attempt < config.max_attempts_stage_3 {
            attempt += 1;
            retries += 1;
            let mut rng = rng_for(seed, "retry", (outcome.restart * 1000 + attempt) as u64);
            let init = SpredState::random(outcome.strategy, cv.n(), cv.dim(), &mut rng);
            if let Ok(fit) = problem.minimize(&init, &cfg) {
                if fit.converged && fit.objective.is_finite() {
                    outcome.fit = fit;
                }
            }
        }
    }
    let best = search
        .outcomes
        .iter()
        .enumerate()
        .fold(0, |b, (i, o)| if o.fit.objective < search.outcomes[b].fit.objective { i } else { b });
    search.best = best;
    let fit = &search.best().fit;
    if !fit.converged {
        log::warn!("final fit did not converge after {retries} retries");
    }
    let gamma = fit.gamma.clone();
    let selected: Vec<usize> = (0..gamma.len()).filter(|&v| gamma[v] > 0.0).collect();
    Ok(FinalFit {
        importance: importance_scores(x, &gamma),
        selected,
        lambda,
        budget,
        objective: fit.objective,
        loss: fit.loss,
        diagnostics: FitDiagnostics {
            restart_objectives: search.outcomes.iter().map(|o| o.fit.objective).collect(),
            restart_converged: search.outcomes.iter().map(|o| o.fit.converged).collect(),
            converged: fit.converged,
            retries,
            pinned: problem.pinned().iter().enumerate().filter(|(_, &p)| p).map(|(v, _)| v).collect(),
            fallback_points: fit.fallback_points.clone(),
            grid_adequate: true,
            nestedness_violations: Vec::new(),
        },
        gamma_hat: gamma,
    })
}

/// Ancestor/descendant pairs that are both selected.
pub fn check_nestedness(tree: &AggregationTree, selected: &[usize]) -> Vec<(usize, usize)> {
    tree.nested_pairs(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::fixtures::figure_one;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn folds_cover_and_balance() {
        let plan = make_folds(10, 5, 3).unwrap();
        assert!(plan.test.iter().all(|t| t.len() == 2));
        let mut all: Vec<usize> = plan.test.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let sizes: Vec<usize> = make_folds(11, 5, 3).unwrap().test.iter().map(|t| t.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert_eq!(make_folds(11, 5, 3).unwrap(), make_folds(11, 5, 3).unwrap());
        assert_ne!(make_folds(50, 5, 3).unwrap(), make_folds(50, 5, 4).unwrap());
        assert!(matches!(make_folds(3, 5, 0), Err(SelectError::TooFewSamples { .. })));
        let train = plan.train(0);
        assert!(train.iter().all(|i| !plan.test[0].contains(i)));
        assert_eq!(train.len(), 8);
    }

    #[test]
    fn grids_descend() {
        let g = LambdaGrid::Range { min: 0.01, max: 1.0, nlambda: 3 }.resolve(5.0).unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 0.1).abs() < 1e-12 && (g[2] - 0.01).abs() < 1e-12);
        let e = LambdaGrid::Explicit { values: vec![0.1, 2.0, 0.5] }.resolve(1.0).unwrap();
        assert_eq!(e, vec![2.0, 0.5, 0.1]);
        let a = LambdaGrid::default().resolve(7.0).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a[0], 70.0);
        assert!((a[9] - 7e-4).abs() < 1e-15);
    }

    #[test]
    fn tie_breaks_prefer_sparser_then_cheaper() {
        let cells = [
            CvCell { lambda: 1.0, budget: 10, sse: 2.0 },
            CvCell { lambda: 2.0, budget: 20, sse: 2.0 },
            CvCell { lambda: 2.0, budget: 10, sse: 2.0 },
            CvCell { lambda: 0.5, budget: 10, sse: f64::INFINITY },
        ];
        assert_eq!(pick_cell(&cells).unwrap(), cells[2]);
        assert!(pick_cell(&cells[3..]).is_none());
    }

    #[test]
    fn budgets_default_to_landmarks() {
        assert_eq!(SelectConfig::default().resolved_budgets(), vec![10, 20, 30]);
        let c = SelectConfig { restarts: 2, ..Default::default() };
        assert_eq!(c.resolved_budgets(), vec![1, 2]);
    }

    #[test]
    fn nestedness_examples() {
        let tree = figure_one();
        let (six, seven, two) = (tree.node("6").unwrap(), tree.node("7").unwrap(), tree.node("2").unwrap());
        assert_eq!(check_nestedness(&tree, &[seven, six]), vec![(seven, six)]);
        assert!(check_nestedness(&tree, &[seven, two]).is_empty());
        assert!(check_nestedness(&tree, &[]).is_empty());
    }

    #[test]
    fn importance_is_nonnegative_and_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array2<f64> = Array2::from_shape_fn((30, 3), |_| rng.random_range(-1.0..1.0));
        let imp = importance_scores(x.view(), &[0.5, 0.0, 2.0]);
        assert_eq!(imp.len(), 2);
        assert_eq!(imp[0].node, 2);
        assert!(imp.iter().all(|i| i.score > 0.0));
    }

    fn planted(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Array2<f64> = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|i| (3.0 * x[[i, 0]]).sin() + 0.05 * rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn huge_lambda_gives_empty_fit() {
        let (x, y) = planted(2, 40);
        let cfg = SelectConfig { restarts: 3, ..Default::default() };
        let fit = final_fit(x.view(), &y, &[1.0, 1.0, f64::INFINITY], 1e9, 3, &cfg, &OptimizerConfig::default()).unwrap();
        assert!(fit.selected.is_empty());
        assert!(fit.gamma_hat.iter().all(|&g| g == 0.0));
        assert!(fit.importance.is_empty());
        assert_eq!(fit.diagnostics.pinned, vec![2]);
    }

    #[test]
    fn single_level_grid_selects_it() {
        let (x, y) = planted(3, 40);
        let cfg = SelectConfig {
            restarts: 2,
            lambda_grid: LambdaGrid::Explicit { values: vec![0.01] },
            ..Default::default()
        };
        let sel = cv_select(x.view(), &y, &[1.0, 1.0, 1.0], &cfg, &OptimizerConfig::default()).unwrap();
        assert_eq!(sel.lambda_star, 0.01);
        assert_eq!(sel.table.len(), 2);
        let min = sel.table.iter().map(|c| c.sse).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.table.iter().find(|c| c.budget == sel.m_star).unwrap().sse, min);
    }

    #[test]
    fn cv_selects_relevant_feature_and_is_deterministic() {
        let (x, y) = planted(4, 60);
        let cfg = SelectConfig { restarts: 3, nfolds: 3, lambda_grid: LambdaGrid::Auto { nlambda: 4, ratio: 1e-2 }, ..Default::default() };
        let w = [1.0, 10.0, 10.0];
        let opt = OptimizerConfig { seed: 11, ..Default::default() };
        let a = cv_select(x.view(), &y, &w, &cfg, &opt).unwrap();
        let b = cv_select(x.view(), &y, &w, &cfg, &opt).unwrap();
        assert_eq!(a, b);
        assert!(a.grid_adequate);
        let fit = final_fit(x.view(), &y, &w, a.lambda_star, a.m_star, &cfg, &opt).unwrap();
        assert!(fit.selected.contains(&0), "{:?}", fit.gamma_hat);
        let best = a.table.iter().map(|c| c.sse).fold(f64::INFINITY, f64::min);
        assert!(a.table.iter().all(|c| c.sse >= best));
    }
}
