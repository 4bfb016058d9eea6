//! Penalized leave-one-out objective in factorized form and the box-constrained
//! quasi-Newton search used to minimize it.
//!
//! The weighted L1 penalty `λ Σ ŵ_v γ_v` over `γ >= 0` is optimized through
//! `γ = u ⊙ w` with the smooth penalty `Σ κ_v (u_v² + w_v²)`, `κ_v = λ ŵ_v / 2`.
//! For a fixed product `u_v w_v = γ_v` that penalty is minimized at
//! `u_v = w_v = √γ_v`, where it equals `λ ŵ_v γ_v`.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{KernelError, KernelKind, LooCv, ZeroDenominatorPolicy};
use crate::rng::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Tolerance on the projected-gradient infinity norm and on the relative
    /// objective decrease between accepted steps.
    pub eps: f64,
    pub max_iterations: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { eps: 1e-6, max_iterations: 500, memory: 10, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.eps > 0.0) {
            return Err(OptimError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.memory == 0 || self.max_iterations == 0 {
            return Err(OptimError::InvalidConfig("memory and max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Box `lower <= x <= upper`; `upper` may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn nonnegative(dim: usize) -> Self {
        Self { lower: vec![0.0; dim], upper: vec![f64::INFINITY; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn project(&self, x: &mut [f64]) {
        for ((xi, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(l, u);
        }
    }

    /// Coordinate is held at a bound by the sign of its gradient.
    fn is_blocked(&self, i: usize, x: f64, g: f64) -> bool {
        (x <= self.lower[i] && g > 0.0) || (x >= self.upper[i] && g < 0.0) || self.lower[i] == self.upper[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ProjectedGradient,
    RelativeDecrease,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective value after every accepted step, starting point first.
    pub trace: Vec<f64>,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::ProjectedGradient | Termination::RelativeDecrease)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        // Distance moved by a unit projected steepest-descent step.
        let step = (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]) - x[i];
        m = m.max(step.abs());
    }
    m
}

/// Limited-memory BFGS with gradient projection onto a box.
///
/// Directions come from the two-loop recursion restricted to coordinates not
/// held at a bound; steps follow the projection arc `P(x + α d)` with Armijo
/// backtracking from `α = 1`. Accepted objective values never increase.
pub fn box_minimize<F>(
    mut f: F,
    x0: &[f64],
    bounds: &Bounds,
    cfg: &OptimizerConfig,
) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let dim = x0.len();
    if bounds.dim() != dim {
        return Err(OptimError::DimensionMismatch { expected: bounds.dim(), found: dim });
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteStart);
    }
    let mut trace = vec![fx];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut xn = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    let mut d = vec![0.0; dim];
    let mut alpha_buf = vec![0.0; cfg.memory];

    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if projected_gradient_norm(&x, &g, bounds) <= cfg.eps {
            termination = Termination::ProjectedGradient;
            break;
        }
        iterations += 1;
        let free: Vec<bool> = (0..dim).map(|i| !bounds.is_blocked(i, x[i], g[i])).collect();

        // Two-loop recursion on the free coordinates.
        for i in 0..dim {
            d[i] = if free[i] { g[i] } else { 0.0 };
        }
        for (k, (s, y, rho)) in memory.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            for i in 0..dim {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
        }
        if let Some((s, y, _)) = memory.back() {
            let scale = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for (k, (s, y, rho)) in memory.iter().enumerate() {
            let b = rho * dot(y, &d);
            for i in 0..dim {
                if free[i] {
                    d[i] += s[i] * (alpha_buf[k] - b);
                }
            }
        }
        for i in 0..dim {
            d[i] = if free[i] { -d[i] } else { 0.0 };
        }
        if dot(&g, &d) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            memory.clear();
            for i in 0..dim {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }

        let mut alpha = if memory.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 1.0 { 1.0 / dmax } else { 1.0 }
        } else {
            1.0
        };
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..dim {
                xn[i] = x[i] + alpha * d[i];
            }
            bounds.project(&mut xn);
            let mut moved = false;
            let mut decrease = 0.0;
            for i in 0..dim {
                let step = xn[i] - x[i];
                moved |= step != 0.0;
                decrease += g[i] * step;
            }
            if !moved {
                break;
            }
            let fnew = f(&xn, &mut gn);
            evaluations += 1;
            if fnew.is_finite() && gn.iter().all(|v| v.is_finite()) && fnew <= fx + 1e-4 * decrease {
                accepted = true;
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) && sy > 0.0 {
                    if memory.len() == cfg.memory {
                        memory.pop_front();
                    }
                    memory.push_back((s, y, 1.0 / sy));
                }
                let rel = (fx - fnew) / fx.abs().max(fnew.abs()).max(f64::MIN_POSITIVE);
                std::mem::swap(&mut x, &mut xn);
                std::mem::swap(&mut g, &mut gn);
                fx = fnew;
                trace.push(fx);
                log::trace!(
                    "iter {iterations} objective {fx:.10e} pg {:.3e}",
                    projected_gradient_norm(&x, &g, bounds)
                );
                if rel <= cfg.eps {
                    termination = Termination::RelativeDecrease;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if memory.is_empty() {
                termination = Termination::LineSearchFailed;
                break;
            }
            memory.clear();
            continue;
        }
        if termination == Termination::RelativeDecrease {
            break;
        }
    }
    if termination == Termination::MaxIterations && projected_gradient_norm(&x, &g, bounds) <= cfg.eps {
        termination = Termination::ProjectedGradient;
    }
    Ok(Minimum { x, objective: fx, gradient: g, iterations, evaluations, termination, trace })
}

/// Random initialization scheme for the factors `u` and `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Normal(0.1, 0.01²) per element.
    Smallest,
    /// Normal(1, 0.25²) per element.
    Small,
    /// Normal(max(1, n^{2/(4+T)}), 1) per element.
    Large,
}

pub const ALL_STRATEGIES: [InitStrategy; 3] = [InitStrategy::Smallest, InitStrategy::Small, InitStrategy::Large];

const INIT_FLOOR: f64 = 1e-6;

impl InitStrategy {
    pub fn mean_sd(self, n: usize, dim: usize) -> (f64, f64) {
        match self {
            InitStrategy::Smallest => (0.1, 0.01),
            InitStrategy::Small => (1.0, 0.25),
            InitStrategy::Large => ((n as f64).powf(2.0 / (4.0 + dim as f64)).max(1.0), 1.0),
        }
    }

    /// Draws `dim` values, truncated below at `1e-6`.
    pub fn draw<R: Rng + ?Sized>(self, n: usize, dim: usize, rng: &mut R) -> Vec<f64> {
        let (mu, sd) = self.mean_sd(n, dim);
        let normal = Normal::new(mu, sd).expect("valid normal parameters");
        (0..dim).map(|_| normal.sample(rng).max(INIT_FLOOR)).collect()
    }
}

impl std::str::FromStr for InitStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "smallest" => Ok(Self::Smallest),
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            other => Err(format!("unknown init strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpredState {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl SpredState {
    pub fn new(u: Vec<f64>, w: Vec<f64>) -> Self {
        assert_eq!(u.len(), w.len());
        Self { u, w }
    }

    /// Balanced factorization `u = w = √γ`.
    pub fn from_gamma(gamma: &[f64]) -> Self {
        let r: Vec<f64> = gamma.iter().map(|g| g.max(0.0).sqrt()).collect();
        Self { u: r.clone(), w: r }
    }

    /// Balanced factorization of `gamma` where it is positive. Zero entries
    /// flagged in `reseed` take the values of `fill_u`/`fill_w` so the search
    /// can leave the origin there; the rest stay at zero.
    pub fn warm(gamma: &[f64], reseed: &[bool], fill_u: &[f64], fill_w: &[f64]) -> Self {
        let mut u = Vec::with_capacity(gamma.len());
        let mut w = Vec::with_capacity(gamma.len());
        for (v, &g) in gamma.iter().enumerate() {
            if g > 0.0 {
                u.push(g.sqrt());
                w.push(g.sqrt());
            } else if reseed[v] {
                u.push(fill_u[v]);
                w.push(fill_w[v]);
            } else {
                u.push(0.0);
                w.push(0.0);
            }
        }
        Self { u, w }
    }

    pub fn random<R: Rng + ?Sized>(strategy: InitStrategy, n: usize, dim: usize, rng: &mut R) -> Self {
        let u = strategy.draw(n, dim, rng);
        let w = strategy.draw(n, dim, rng);
        Self { u, w }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.u.iter().zip(&self.w).map(|(a, b)| a * b).collect()
    }

    fn to_theta(&self) -> Vec<f64> {
        self.u.iter().chain(&self.w).copied().collect()
    }

    fn from_theta(theta: &[f64]) -> Self {
        let t = theta.len() / 2;
        Self { u: theta[..t].to_vec(), w: theta[t..].to_vec() }
    }
}

/// Objective value and gradients of the factorized penalized loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SpredValue {
    pub objective: f64,
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub fallback_points: Vec<usize>,
}

/// `L_n(u ⊙ w) + Σ_v κ_v (u_v² + w_v²)` on a fixed sample.
#[derive(Debug, Clone)]
pub struct SpredProblem<'a> {
    loocv: &'a LooCv,
    lambda: f64,
    weights: Vec<f64>,
    pinned: Vec<bool>,
}

impl<'a> SpredProblem<'a> {
    /// `weights` may contain `+∞`; those coordinates are held at zero.
    pub fn new(loocv: &'a LooCv, lambda: f64, weights: &[f64]) -> Result<Self, OptimError> {
        if weights.len() != loocv.dim() {
            return Err(OptimError::DimensionMismatch { expected: loocv.dim(), found: weights.len() });
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(OptimError::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(OptimError::InvalidConfig("weights must be nonnegative".into()));
        }
        let pinned = weights.iter().map(|w| w.is_infinite()).collect();
        Ok(Self { loocv, lambda, weights: weights.to_vec(), pinned })
    }

    /// Unpenalized problem (`λ = 0`, unit weights).
    pub fn unpenalized(loocv: &'a LooCv) -> Self {
        Self::new(loocv, 0.0, &vec![1.0; loocv.dim()]).expect("unit weights are valid")
    }

    pub fn loocv(&self) -> &LooCv {
        self.loocv
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn pinned(&self) -> &[bool] {
        &self.pinned
    }

    pub fn kappa(&self, v: usize) -> f64 {
        if self.pinned[v] || self.lambda == 0.0 {
            0.0
        } else {
            0.5 * self.lambda * self.weights[v]
        }
    }

    /// `Σ κ_v (u_v² + w_v²)` over free coordinates.
    pub fn penalty(&self, state: &SpredState) -> f64 {
        (0..self.dim())
            .map(|v| self.kappa(v) * (state.u[v] * state.u[v] + state.w[v] * state.w[v]))
            .sum()
    }

    /// Box for `θ = [u, w]`: nonnegative, pinned coordinates fixed at zero.
    pub fn bounds(&self) -> Bounds {
        let mut b = Bounds::nonnegative(2 * self.dim());
        for (v, &p) in self.pinned.iter().enumerate() {
            if p {
                b.upper[v] = 0.0;
                b.upper[v + self.dim()] = 0.0;
            }
        }
        b
    }

    fn pin(&self, state: &mut SpredState) {
        for (v, &p) in self.pinned.iter().enumerate() {
            if p {
                state.u[v] = 0.0;
                state.w[v] = 0.0;
            }
        }
    }

    pub fn evaluate(&self, state: &SpredState, policy: ZeroDenominatorPolicy) -> Result<SpredValue, OptimError> {
        let t = self.dim();
        if state.dim() != t {
            return Err(OptimError::DimensionMismatch { expected: t, found: state.dim() });
        }
        let mut state = state.clone();
        self.pin(&mut state);
        let gamma = state.gamma();
        // With u_v = w_v = 0 both factor gradients vanish whatever ∂L/∂γ_v is.
        let free: Vec<bool> =
            (0..t).map(|v| !self.pinned[v] && (state.u[v] != 0.0 || state.w[v] != 0.0)).collect();
        let report = self.loocv.loss_and_gradient(&gamma, Some(&free), policy)?;
        let mut grad_u = vec![0.0; t];
        let mut grad_w = vec![0.0; t];
        for v in 0..t {
            if !free[v] {
                continue;
            }
            let k = self.kappa(v);
            grad_u[v] = report.gradient[v] * state.w[v] + 2.0 * k * state.u[v];
            grad_w[v] = report.gradient[v] * state.u[v] + 2.0 * k * state.w[v];
        }
        Ok(SpredValue {
            objective: report.loss + self.penalty(&state),
            loss: report.loss,
            grad_u,
            grad_w,
            fallback_points: report.fallback_points,
        })
    }

    /// Runs one box-constrained search from `init`, then repeatedly drops
    /// coordinates whose removal does not raise the penalized objective and
    /// re-polishes the rest. The pruning is a pure descent step: it only turns
    /// near-zero products that the factorization approaches slowly into exact
    /// zeros.
    pub fn minimize(&self, init: &SpredState, cfg: &OptimizerConfig) -> Result<SpredFit, OptimError> {
        let t = self.dim();
        if init.dim() != t {
            return Err(OptimError::DimensionMismatch { expected: t, found: init.dim() });
        }
        let mut start = init.clone();
        self.pin(&mut start);
        let mut minimum = self.search(&start, cfg)?;
        let (mut iterations, mut evaluations) = (minimum.iterations, minimum.evaluations);
        let mut trace = std::mem::take(&mut minimum.trace);
        for _ in 0..t {
            let Some(pruned) = self.prune(&SpredState::from_theta(&minimum.x))? else { break };
            let mut next = self.search(&pruned, cfg)?;
            iterations += next.iterations;
            evaluations += next.evaluations;
            trace.append(&mut next.trace);
            minimum = next;
        }
        let state = SpredState::from_theta(&minimum.x);
        let value = self.evaluate(&state, ZeroDenominatorPolicy::MeanFallback)?;
        let mut gamma = state.gamma();
        snap_to_zero(&mut gamma);
        Ok(SpredFit {
            gamma,
            objective: minimum.objective,
            loss: value.loss,
            converged: minimum.converged(),
            termination: minimum.termination,
            iterations,
            evaluations,
            fallback_points: value.fallback_points,
            trace,
            state,
        })
    }

    fn search(&self, start: &SpredState, cfg: &OptimizerConfig) -> Result<Minimum, OptimError> {
        let t = self.dim();
        let mut failure: Option<OptimError> = None;
        let minimum = box_minimize(
            |theta, grad| {
                let state = SpredState::from_theta(theta);
                match self.evaluate(&state, ZeroDenominatorPolicy::MeanFallback) {
                    Ok(v) => {
                        grad[..t].copy_from_slice(&v.grad_u);
                        grad[t..].copy_from_slice(&v.grad_w);
                        v.objective
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &start.to_theta(),
            &self.bounds(),
            cfg,
        );
        minimum.map_err(|e| failure.unwrap_or(e))
    }

    /// Penalized objective in `γ` coordinates, `L(γ) + λ Σ ŵ_v γ_v`.
    fn gamma_objective(&self, gamma: &[f64]) -> Result<f64, OptimError> {
        let loss = self.loocv.loss(gamma, KernelKind::Gaussian, ZeroDenominatorPolicy::MeanFallback)?.loss;
        let penalty: f64 = gamma.iter().enumerate().filter(|(_, g)| **g > 0.0).map(|(v, g)| 2.0 * self.kappa(v) * g).sum();
        Ok(loss + penalty)
    }

    /// Zeroes coordinates one at a time, smallest first, keeping each removal
    /// that does not increase the penalized objective. Returns the balanced
    /// state `u = w = √γ` when anything was removed.
    fn prune(&self, state: &SpredState) -> Result<Option<SpredState>, OptimError> {
        let mut gamma = state.gamma();
        snap_to_zero(&mut gamma);
        let mut order: Vec<usize> = (0..self.dim()).filter(|&v| gamma[v] > 0.0).collect();
        order.sort_by(|&a, &b| gamma[a].total_cmp(&gamma[b]).then(a.cmp(&b)));
        let mut current = self.gamma_objective(&gamma)?;
        let mut removed = false;
        for v in order {
            let kept = gamma[v];
            gamma[v] = 0.0;
            let trial = self.gamma_objective(&gamma)?;
            if trial <= current {
                current = trial;
                removed = true;
            } else {
                gamma[v] = kept;
            }
        }
        Ok(removed.then(|| SpredState::from_gamma(&gamma)))
    }
}

/// Result of one factorized search.
#[derive(Debug, Clone, PartialEq)]
pub struct SpredFit {
    pub state: SpredState,
    /// `u ⊙ w` with negligible entries snapped to exact zero.
    pub gamma: Vec<f64>,
    pub objective: f64,
    pub loss: f64,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub evaluations: usize,
    /// Points that fell back to the unweighted mean at the final iterate.
    pub fallback_points: Vec<usize>,
    pub trace: Vec<f64>,
}

/// Sets entries below `1e-8 · max(1, max γ)` to exactly zero.
pub fn snap_to_zero(gamma: &mut [f64]) {
    let top = gamma.iter().fold(1.0f64, |m, &g| m.max(g));
    let threshold = 1e-8 * top;
    for g in gamma.iter_mut() {
        if *g < threshold {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartOutcome {
    pub restart: usize,
    pub strategy: InitStrategy,
    pub fit: SpredFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartSearch {
    /// One entry per restart that produced a finite result, in restart order.
    pub outcomes: Vec<RestartOutcome>,
    pub failed: usize,
    /// Position in `outcomes` of the lowest objective (ties: lowest restart).
    pub best: usize,
}

impl RestartSearch {
    pub fn best(&self) -> &RestartOutcome {
        &self.outcomes[self.best]
    }

    /// Best outcome among the first `budget` restarts.
    pub fn best_within(&self, budget: usize) -> Option<&RestartOutcome> {
        best_of(self.outcomes.iter().filter(|o| o.restart < budget))
    }
}

fn best_of<'a, I: Iterator<Item = &'a RestartOutcome>>(it: I) -> Option<&'a RestartOutcome> {
    let mut best: Option<&RestartOutcome> = None;
    for o in it {
        if best.is_none_or(|b| o.fit.objective < b.fit.objective) {
            best = Some(o);
        }
    }
    best
}

/// Strategy used by restart `r`: strategies are cycled so any prefix of the
/// restarts is split as evenly as possible.
pub fn strategy_for(strategies: &[InitStrategy], restart: usize) -> InitStrategy {
    strategies[restart % strategies.len()]
}

/// Runs `restarts` independent searches from random starts and keeps the one
/// with the lowest objective. Restart `r` draws from the substream
/// `(cfg.seed, "restart", r)`, so the result does not depend on scheduling.
pub fn restart_search(
    problem: &SpredProblem<'_>,
    restarts: usize,
    strategies: &[InitStrategy],
    cfg: &OptimizerConfig,
) -> Result<RestartSearch, OptimError> {
    if restarts == 0 || strategies.is_empty() {
        return Err(OptimError::InvalidConfig("need at least one restart and one strategy".into()));
    }
    let n = problem.loocv().n();
    let dim = problem.dim();
    let results: Vec<Result<RestartOutcome, OptimError>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let strategy = strategy_for(strategies, r);
            let mut rng = rng_for(cfg.seed, "restart", r as u64);
            let init = SpredState::random(strategy, n, dim, &mut rng);
            problem.minimize(&init, cfg).map(|fit| RestartOutcome { restart: r, strategy, fit })
        })
        .collect();
    let mut outcomes = Vec::with_capacity(restarts);
    let mut failed = 0;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(o) if o.fit.objective.is_finite() => outcomes.push(o),
            Ok(_) => failed += 1,
            Err(e) => {
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    if outcomes.is_empty() {
        if let Some(e @ OptimError::InvalidConfig(_)) = last_err {
            return Err(e);
        }
        return Err(OptimError::AllRestartsFailed(restarts));
    }
    let best_restart = best_of(outcomes.iter()).expect("nonempty").restart;
    let best = outcomes.iter().position(|o| o.restart == best_restart).expect("present");
    Ok(RestartSearch { outcomes, failed, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig { eps: 1e-10, max_iterations: 2000, ..Default::default() }
    }

    #[test]
    fn interior_quadratic() {
        let m = box_minimize(
            |x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                (x[0] - 3.0).powi(2)
            },
            &[0.5],
            &Bounds::nonnegative(1),
            &cfg(),
        )
        .unwrap();
        assert!((m.x[0] - 3.0).abs() < 1e-6);
        assert!(m.converged());
    }

    #[test]
    fn active_bound_quadratic() {
        let m = box_minimize(
            |x, g| {
                g[0] = 2.0 * (x[0] + 2.0);
                (x[0] + 2.0).powi(2)
            },
            &[5.0],
            &Bounds::nonnegative(1),
            &cfg(),
        )
        .unwrap();
        assert_eq!(m.x[0], 0.0);
        assert_eq!(m.termination, Termination::ProjectedGradient);
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn rosenbrock_positive_quadrant() {
        let m = box_minimize(rosenbrock, &[0.5, 0.5], &Bounds::nonnegative(2), &cfg()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
        for w in m.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn upper_bounds_respected() {
        let bounds = Bounds { lower: vec![0.0, 0.0], upper: vec![0.5, f64::INFINITY] };
        let m = box_minimize(rosenbrock, &[0.2, 0.2], &bounds, &cfg()).unwrap();
        assert!(m.x[0] <= 0.5);
        assert!((m.x[0] - 0.5).abs() < 1e-6);
        assert!((m.x[1] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = box_minimize(|_, _| f64::NAN, &[1.0], &Bounds::nonnegative(1), &cfg());
        assert_eq!(r.unwrap_err(), OptimError::NonFiniteStart);
        let bad = OptimizerConfig { eps: 0.0, ..Default::default() };
        assert!(matches!(
            box_minimize(rosenbrock, &[0.5, 0.5], &Bounds::nonnegative(2), &bad),
            Err(OptimError::InvalidConfig(_))
        ));
    }

    fn instance(seed: u64, n: usize, t: usize) -> LooCv {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Array2<f64> = Array2::from_shape_fn((n, t), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|i| (2.0 * x[[i, 0]]).sin() + 0.1 * rng.random_range(-1.0..1.0)).collect();
        LooCv::new(x.view(), &y).unwrap()
    }

    #[test]
    fn zero_lambda_is_plain_loss() {
        let cv = instance(1, 12, 3);
        let p = SpredProblem::new(&cv, 0.0, &[1.0, 2.0, 3.0]).unwrap();
        let st = SpredState::new(vec![0.5, 1.0, 0.2], vec![1.5, 0.3, 2.0]);
        let v = p.evaluate(&st, ZeroDenominatorPolicy::Error).unwrap();
        let l = cv.loss(&st.gamma(), crate::KernelKind::Gaussian, ZeroDenominatorPolicy::Error).unwrap();
        assert_eq!(v.objective, l.loss);
    }

    #[test]
    fn spred_gradients_match_finite_differences() {
        for seed in 0..5 {
            let cv = instance(10 + seed, 10, 4);
            let p = SpredProblem::new(&cv, 0.3, &[0.5, 1.0, 2.0, 0.1]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let st = SpredState::random(InitStrategy::Small, 10, 4, &mut rng);
            let v = p.evaluate(&st, ZeroDenominatorPolicy::Error).unwrap();
            let h = 1e-6;
            for k in 0..8 {
                let bump = |delta: f64| {
                    let mut s = st.clone();
                    if k < 4 { s.u[k] += delta } else { s.w[k - 4] += delta }
                    p.evaluate(&s, ZeroDenominatorPolicy::Error).unwrap().objective
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if k < 4 { v.grad_u[k] } else { v.grad_w[k - 4] };
                assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-5, "k={k}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn balanced_state_has_symmetric_gradient() {
        let cv = instance(3, 9, 3);
        let p = SpredProblem::new(&cv, 0.7, &[1.0, 0.2, 4.0]).unwrap();
        let st = SpredState::from_gamma(&[0.4, 1.3, 0.0]);
        let v = p.evaluate(&st, ZeroDenominatorPolicy::Error).unwrap();
        assert_eq!(v.grad_u, v.grad_w);
    }

    #[test]
    fn pinned_coordinates_stay_zero() {
        let cv = instance(4, 15, 3);
        let p = SpredProblem::new(&cv, 0.01, &[1.0, f64::INFINITY, 1.0]).unwrap();
        let init = SpredState::new(vec![1.0; 3], vec![1.0; 3]);
        let fit = p.minimize(&init, &OptimizerConfig::default()).unwrap();
        assert_eq!(fit.state.u[1], 0.0);
        assert_eq!(fit.state.w[1], 0.0);
        assert_eq!(fit.gamma[1], 0.0);
    }

    #[test]
    fn restart_search_is_deterministic() {
        let cv = instance(5, 20, 2);
        let p = SpredProblem::new(&cv, 0.001, &[1.0, 1.0]).unwrap();
        let c = OptimizerConfig { seed: 42, ..Default::default() };
        let a = restart_search(&p, 1, &[InitStrategy::Small], &c).unwrap();
        let b = restart_search(&p, 1, &[InitStrategy::Small], &c).unwrap();
        assert_eq!(a, b);
        let six = restart_search(&p, 6, &ALL_STRATEGIES, &c).unwrap();
        assert_eq!(six.outcomes.len() + six.failed, 6);
        let best = six.best().fit.objective;
        assert!(six.outcomes.iter().all(|o| o.fit.objective >= best));
        assert!(six.best_within(1).unwrap().fit.objective >= best);
        assert_eq!(six.outcomes[2].strategy, InitStrategy::Large);
    }

    #[test]
    fn convex_surrogate_restarts_agree() {
        // A quadratic in (u, w) with a unique minimizer at u = (1, 2), w = (3, 4).
        let target = [1.0, 2.0, 3.0, 4.0];
        let mut finals = Vec::new();
        for r in 0..6 {
            let mut rng = rng_for(9, "restart", r);
            let st = SpredState::random(strategy_for(&ALL_STRATEGIES, r as usize), 100, 2, &mut rng);
            let m = box_minimize(
                |x, g| {
                    let mut f = 0.0;
                    for i in 0..4 {
                        g[i] = 2.0 * (x[i] - target[i]);
                        f += (x[i] - target[i]).powi(2);
                    }
                    f
                },
                &st.to_theta(),
                &Bounds::nonnegative(4),
                &cfg(),
            )
            .unwrap();
            finals.push(m.x);
        }
        for x in &finals {
            for i in 0..4 {
                assert!((x[i] - target[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn init_draws_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in ALL_STRATEGIES {
            let v = s.draw(1000, 15, &mut rng);
            assert!(v.iter().all(|&x| x >= 1e-6));
        }
        let (mu, _) = InitStrategy::Large.mean_sd(1000, 31);
        assert_relative_eq!(mu, 1000f64.powf(2.0 / 35.0));
        assert_eq!(InitStrategy::Large.mean_sd(1, 100).0, 1.0);
    }

    #[test]
    fn snapping_threshold() {
        let mut g = vec![5.0, 4e-8, 6e-8, 0.0];
        snap_to_zero(&mut g);
        assert_eq!(g, vec![5.0, 0.0, 6e-8, 0.0]);
    }

    proptest! {
        #[test]
        fn balanced_factorization_gives_weighted_l1(
            gamma in prop::collection::vec(0.0f64..10.0, 1..8),
            seed in 0u64..1000,
            lambda in 0.0f64..5.0,
        ) {
            let t = gamma.len();
            let cv = instance(seed, 3, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..4.0)).collect();
            let p = SpredProblem::new(&cv, lambda, &w).unwrap();
            let balanced = p.penalty(&SpredState::from_gamma(&gamma));
            let l1: f64 = gamma.iter().zip(&w).map(|(g, w)| lambda * w * g).sum();
            prop_assert!((balanced - l1).abs() <= 1e-12 * l1.max(1.0));
            // Any other factorization costs at least as much.
            let c: f64 = rng.random_range(0.1..10.0);
            let u: Vec<f64> = gamma.iter().map(|g| g.sqrt() * c).collect();
            let wv: Vec<f64> = gamma.iter().map(|g| g.sqrt() / c).collect();
            prop_assert!(p.penalty(&SpredState::new(u, wv)) >= balanced - 1e-12 * l1.max(1.0));
        }
    }
}
