//! End-to-end estimator: pilot weights on the leaves, penalized bandwidth
//! selection on the aggregated features, and prediction.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{nw_predict_batch, Bandwidth, KernelError, KernelKind, Predictions};
use crate::optim::OptimizerConfig;
use crate::pilot::{run_pilot, PilotConfig, PilotError, PilotFit};
use crate::rng::substream;
use crate::select::{check_nestedness, cv_select, final_fit, CvSelection, FinalFit, SelectConfig, SelectError};
use crate::tree::{AggregationTree, TreeError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl FitError {
    /// Whether the failure came from the numerical search rather than bad input.
    pub fn is_optimization_failure(&self) -> bool {
        matches!(
            self,
            FitError::Pilot(PilotError::OptimizationFailed(_))
                | FitError::Pilot(PilotError::NoUsablePoints)
                | FitError::Select(SelectError::Optim(_))
                | FitError::Select(SelectError::AllCellsFailed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrTexasConfig {
    pub pilot: PilotConfig,
    pub select: SelectConfig,
    pub optimizer: OptimizerConfig,
    /// Fixed penalty level; skips cross-validation and uses every restart.
    pub lambda: Option<f64>,
}

impl Default for KrTexasConfig {
    fn default() -> Self {
        Self {
            pilot: PilotConfig::default(),
            select: SelectConfig::default(),
            optimizer: OptimizerConfig::default(),
            lambda: None,
        }
    }
}

impl KrTexasConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.optimizer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        self.pilot.validate()?;
        self.select.validate()?;
        self.optimizer.validate().map_err(SelectError::from)?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(SelectError::InvalidConfig(format!("lambda must be finite and >= 0, got {l}")).into());
            }
        }
        Ok(())
    }
}

/// A fitted model together with the training data it predicts from.
#[derive(Debug, Clone)]
pub struct KrTexasModel {
    pub tree: AggregationTree,
    pub x_aggregated: Array2<f64>,
    pub y: Vec<f64>,
    pub pilot: PilotFit,
    pub selection: Option<CvSelection>,
    pub fit: FinalFit,
    /// Wall-clock seconds spent in each stage, in run order.
    pub timings: Vec<(String, f64)>,
}

/// Fits the estimator on leaf-level covariates `x` (columns in leaf order).
pub fn fit(
    tree: &AggregationTree,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    config: &KrTexasConfig,
) -> Result<KrTexasModel, FitError> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(FitError::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    let seed = config.optimizer.seed;
    let mut timings = Vec::with_capacity(3);
    let clock = Instant::now();
    let pilot_opt = OptimizerConfig { seed: substream(seed, "stage", 1), ..config.optimizer };
    let pilot = run_pilot(tree, x, y, &config.pilot, &pilot_opt)?;
    log::info!(
        "pilot weights: {} finite of {}",
        pilot.weights.w.iter().filter(|w| w.is_finite()).count(),
        tree.node_count()
    );
    timings.push(("pilot".to_string(), clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let xa = tree.aggregate(x)?;
    let select_opt = OptimizerConfig { seed: substream(seed, "stage", 2), ..config.optimizer };
    let (selection, lambda, budget) = match config.lambda {
        Some(l) => (None, l, config.select.restarts),
        None => {
            let sel = cv_select(xa.view(), y, &pilot.weights.w, &config.select, &select_opt)?;
            log::info!("selected lambda {:.4e} with budget {}", sel.lambda_star, sel.m_star);
            let (l, m) = (sel.lambda_star, sel.m_star);
            (Some(sel), l, m)
        }
    };
    timings.push(("cross_validation".to_string(), clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let final_opt = OptimizerConfig { seed: substream(seed, "stage", 3), ..config.optimizer };
    let mut fit = final_fit(xa.view(), y, &pilot.weights.w, lambda, budget, &config.select, &final_opt)?;
    fit.diagnostics.grid_adequate = selection.as_ref().is_none_or(|s| s.grid_adequate);
    fit.diagnostics.nestedness_violations = check_nestedness(tree, &fit.selected);
    timings.push(("final_fit".to_string(), clock.elapsed().as_secs_f64()));
    Ok(KrTexasModel { tree: tree.clone(), x_aggregated: xa, y: y.to_vec(), pilot, selection, fit, timings })
}

impl KrTexasModel {
    /// Predictions at new leaf-level rows. An empty selection predicts the
    /// training mean everywhere.
    pub fn predict(&self, x_new: ArrayView2<'_, f64>) -> Result<Predictions, FitError> {
        let q = self.tree.aggregate(x_new)?;
        predict_aggregated(self.x_aggregated.view(), &self.y, &self.fit.gamma_hat, q.view())
    }

    pub fn selected_names(&self) -> Vec<String> {
        self.fit.selected.iter().map(|&v| self.tree.name(v).to_string()).collect()
    }
}

/// Nadaraya-Watson predictions on aggregated features with bandwidth `gamma`.
pub fn predict_aggregated(
    x_train: ArrayView2<'_, f64>,
    y_train: &[f64],
    gamma: &[f64],
    queries: ArrayView2<'_, f64>,
) -> Result<Predictions, FitError> {
    let bw = Bandwidth::new(gamma.to_vec())?;
    Ok(nw_predict_batch(queries, x_train, y_train, &bw, KernelKind::Gaussian)?)
}
