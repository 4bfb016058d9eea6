//! Anisotropic kernels, Nadaraya-Watson prediction and the leave-one-out
//! cross-validation loss with its analytic gradient.
//!
//! The kernels are unnormalized: the Nadaraya-Watson ratio does not depend on
//! the normalizing constant.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel weights vanish at {} point(s), first index {}", .points.len(), .points.first().copied().unwrap_or(0))]
    ZeroDenominator { points: Vec<usize> },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {min} samples, got {found}")]
    TooFewSamples { min: usize, found: usize },
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),
    #[error("non-finite input data")]
    NonFiniteData,
    #[error("the analytic gradient is only available for the Gaussian kernel")]
    GradientUnsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    /// Kernel value as a function of the scaled squared distance `s`.
    #[inline]
    pub fn profile(self, s: f64) -> f64 {
        match self {
            KernelKind::Gaussian => (-s).exp(),
            KernelKind::Epanechnikov => {
                if s <= 1.0 {
                    1.0 - s
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-feature inverse squared bandwidths. All entries are finite and `>= 0`;
/// a zero entry removes the feature from the metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Bandwidth(Vec<f64>);

impl Bandwidth {
    pub fn new(values: Vec<f64>) -> Result<Self, KernelError> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(KernelError::InvalidBandwidth(format!("entry {i} is {v}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn isotropic(len: usize, gamma: f64) -> Result<Self, KernelError> {
        Self::new(vec![gamma; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Indices with a strictly positive entry.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, g)| **g > 0.0).map(|(i, _)| i).collect()
    }
}

impl TryFrom<Vec<f64>> for Bandwidth {
    type Error = KernelError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Bandwidth> for Vec<f64> {
    fn from(b: Bandwidth) -> Self {
        b.0
    }
}

const LANES: usize = 4;

/// `Σ g_k (a_k - b_k)²` over slices whose length is a multiple of `LANES`,
/// accumulated in independent lanes.
#[inline]
fn lane_sq_dist(a: &[f64], b: &[f64], g: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    for ((ca, cb), cg) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)).zip(g.chunks_exact(LANES)) {
        for l in 0..LANES {
            let d = ca[l] - cb[l];
            acc[l] += cg[l] * d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn scaled_sq_dist(a: &[f64], b: &[f64], gamma: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&x, &y), &g) in a.iter().zip(b).zip(gamma) {
        if g > 0.0 {
            let d = x - y;
            s += g * d * d;
        }
    }
    s
}

/// `exp(-Σ γ_v (a_v - b_v)²)`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], gamma: &Bandwidth) -> f64 {
    KernelKind::Gaussian.profile(scaled_sq_dist(a, b, gamma.as_slice()))
}

/// `(1 - s)·1{s <= 1}` with `s = Σ γ_v (a_v - b_v)²`.
pub fn epanechnikov_kernel(a: &[f64], b: &[f64], gamma: &Bandwidth) -> f64 {
    KernelKind::Epanechnikov.profile(scaled_sq_dist(a, b, gamma.as_slice()))
}

fn check_train(x: ArrayView2<'_, f64>, y: &[f64], gamma: &Bandwidth) -> Result<(), KernelError> {
    if x.nrows() != y.len() {
        return Err(KernelError::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    if x.ncols() != gamma.len() {
        return Err(KernelError::DimensionMismatch { expected: x.ncols(), found: gamma.len() });
    }
    if x.nrows() == 0 {
        return Err(KernelError::TooFewSamples { min: 1, found: 0 });
    }
    Ok(())
}

/// Nadaraya-Watson estimate at `query` from the training sample.
pub fn nw_predict(
    query: &[f64],
    x_train: ArrayView2<'_, f64>,
    y_train: &[f64],
    gamma: &Bandwidth,
    kind: KernelKind,
) -> Result<f64, KernelError> {
    check_train(x_train, y_train, gamma)?;
    if query.len() != gamma.len() {
        return Err(KernelError::DimensionMismatch { expected: gamma.len(), found: query.len() });
    }
    let support = gamma.support();
    let g: Vec<f64> = support.iter().map(|&v| gamma.as_slice()[v]).collect();
    let q: Vec<f64> = support.iter().map(|&v| query[v]).collect();
    let mut xr = vec![0.0; support.len()];
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &yj) in x_train.outer_iter().zip(y_train) {
        for (dst, &v) in xr.iter_mut().zip(&support) {
            *dst = row[v];
        }
        let k = kind.profile(scaled_sq_dist(&q, &xr, &g));
        num += k * yj;
        den += k;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(KernelError::ZeroDenominator { points: vec![0] })
    }
}

/// Batch predictions; rows whose kernel weights all vanish get the training
/// mean and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub values: Vec<f64>,
    pub fallback: Vec<bool>,
}

pub fn nw_predict_batch(
    queries: ArrayView2<'_, f64>,
    x_train: ArrayView2<'_, f64>,
    y_train: &[f64],
    gamma: &Bandwidth,
    kind: KernelKind,
) -> Result<Predictions, KernelError> {
    check_train(x_train, y_train, gamma)?;
    if queries.ncols() != gamma.len() {
        return Err(KernelError::DimensionMismatch { expected: gamma.len(), found: queries.ncols() });
    }
    let mean = y_train.iter().sum::<f64>() / y_train.len() as f64;
    let out: Vec<(f64, bool)> = (0..queries.nrows())
        .into_par_iter()
        .map(|r| {
            let q = queries.row(r).to_vec();
            match nw_predict(&q, x_train, y_train, gamma, kind) {
                Ok(v) => (v, false),
                Err(_) => (mean, true),
            }
        })
        .collect();
    Ok(Predictions {
        values: out.iter().map(|p| p.0).collect(),
        fallback: out.iter().map(|p| p.1).collect(),
    })
}

/// What to do when every leave-one-out kernel weight of a point underflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroDenominatorPolicy {
    #[default]
    Error,
    /// Predict the unweighted leave-one-out mean and record the point.
    MeanFallback,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub loss: f64,
    /// Empty when only the loss was requested.
    pub gradient: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Points that used the mean fallback.
    pub fallback_points: Vec<usize>,
}

/// Squared feature differences `D_v[i, j] = (X̃_iv - X̃_jv)²`, computed on
/// demand from the rows. `materialize` produces the full matrix for one node.
#[derive(Debug, Clone)]
pub struct PairwiseDiffs {
    x: Array2<f64>,
}

impl PairwiseDiffs {
    pub fn new(x: ArrayView2<'_, f64>) -> Self {
        Self { x: x.as_standard_layout().into_owned() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, v: usize) -> f64 {
        let d = self.x[[i, v]] - self.x[[j, v]];
        d * d
    }

    pub fn materialize(&self, v: usize) -> Array2<f64> {
        let n = self.x.nrows();
        Array2::from_shape_fn((n, n), |(i, j)| self.get(i, j, v))
    }
}

const ROW_BLOCK: usize = 32;

#[inline]
fn pair_offset(n: usize, i: usize) -> usize {
    i * (2 * n - i - 1) / 2
}

/// Leave-one-out CV problem on a fixed sample.
#[derive(Debug, Clone)]
pub struct LooCv {
    x: Array2<f64>,
    y: Vec<f64>,
    /// Responses shifted by `y[0]`, so a constant response yields exact zeros.
    yc: Vec<f64>,
    yc_sum: f64,
}

impl LooCv {
    pub fn new(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<Self, KernelError> {
        if x.nrows() != y.len() {
            return Err(KernelError::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        if y.len() < 2 {
            return Err(KernelError::TooFewSamples { min: 2, found: y.len() });
        }
        if !x.iter().chain(y).all(|v| v.is_finite()) {
            return Err(KernelError::NonFiniteData);
        }
        let yc: Vec<f64> = y.iter().map(|v| v - y[0]).collect();
        Ok(Self {
            x: x.as_standard_layout().into_owned(),
            y: y.to_vec(),
            yc_sum: yc.iter().sum(),
            yc,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Problem restricted to the given rows.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, KernelError> {
        let x = self.x.select(ndarray::Axis(0), rows);
        let y: Vec<f64> = rows.iter().map(|&r| self.y[r]).collect();
        Self::new(x.view(), &y)
    }

    /// Rows restricted to `cols`, each zero-padded to a multiple of `LANES`.
    fn gather_padded(&self, cols: &[usize]) -> (Vec<f64>, usize) {
        let width = cols.len().next_multiple_of(LANES);
        let mut out = Vec::with_capacity(self.n() * width);
        for row in self.x.outer_iter() {
            out.extend(cols.iter().map(|&c| row[c]));
            out.extend(std::iter::repeat_n(0.0, width - cols.len()));
        }
        (out, width)
    }

    fn gather(&self, cols: &[usize]) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * cols.len());
        for row in self.x.outer_iter() {
            out.extend(cols.iter().map(|&c| row[c]));
        }
        out
    }

    pub fn loss(
        &self,
        gamma: &[f64],
        kind: KernelKind,
        policy: ZeroDenominatorPolicy,
    ) -> Result<LossReport, KernelError> {
        self.evaluate(gamma, kind, None, policy)
    }

    /// Loss and gradient for the Gaussian kernel. `grad_mask[k] == false`
    /// leaves `gradient[k] = 0` without computing it.
    pub fn loss_and_gradient(
        &self,
        gamma: &[f64],
        grad_mask: Option<&[bool]>,
        policy: ZeroDenominatorPolicy,
    ) -> Result<LossReport, KernelError> {
        let coords: Vec<usize> = match grad_mask {
            Some(mask) => (0..self.dim()).filter(|&k| mask[k]).collect(),
            None => (0..self.dim()).collect(),
        };
        self.evaluate(gamma, KernelKind::Gaussian, Some(&coords), policy)
    }

    fn evaluate(
        &self,
        gamma: &[f64],
        kind: KernelKind,
        grad_coords: Option<&[usize]>,
        policy: ZeroDenominatorPolicy,
    ) -> Result<LossReport, KernelError> {
        let (n, t) = (self.n(), self.dim());
        if gamma.len() != t {
            return Err(KernelError::DimensionMismatch { expected: t, found: gamma.len() });
        }
        if let Some((i, g)) = gamma.iter().enumerate().find(|(_, g)| !g.is_finite() || **g < 0.0) {
            return Err(KernelError::InvalidBandwidth(format!("entry {i} is {g}")));
        }
        let support: Vec<usize> = (0..t).filter(|&v| gamma[v] > 0.0).collect();
        let (xs, ds) = self.gather_padded(&support);
        let mut gs: Vec<f64> = support.iter().map(|&v| gamma[v]).collect();
        gs.resize(ds, 0.0);

        // Kernel weights for pairs i < j, condensed row-major.
        let mut omega = vec![0.0; n * (n - 1) / 2];
        {
            let mut segments: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
            let mut rest: &mut [f64] = &mut omega;
            for i in 0..n {
                let (head, tail) = rest.split_at_mut(n - i - 1);
                segments.push((i, head));
                rest = tail;
            }
            segments.into_par_iter().for_each(|(i, seg)| {
                let xi = &xs[i * ds..(i + 1) * ds];
                for (off, w) in seg.iter_mut().enumerate() {
                    let j = i + 1 + off;
                    let xj = &xs[j * ds..(j + 1) * ds];
                    *w = kind.profile(lane_sq_dist(xi, xj, &gs));
                }
            });
        }

        let y = &self.yc;
        let mut den = vec![0.0; n];
        let mut num = vec![0.0; n];
        let mut idx = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let w = omega[idx];
                idx += 1;
                den[i] += w;
                den[j] += w;
                num[i] += w * y[j];
                num[j] += w * y[i];
            }
        }

        let mut fitted = vec![0.0; n];
        let mut fallback_points = Vec::new();
        for i in 0..n {
            if den[i] > 0.0 {
                fitted[i] = num[i] / den[i];
            } else {
                fallback_points.push(i);
                fitted[i] = (self.yc_sum - y[i]) / (n - 1) as f64;
            }
        }
        if !fallback_points.is_empty() && policy == ZeroDenominatorPolicy::Error {
            return Err(KernelError::ZeroDenominator { points: fallback_points });
        }
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let loss = residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;

        let gradient = match grad_coords {
            None => Vec::new(),
            Some(coords) => {
                if kind != KernelKind::Gaussian {
                    return Err(KernelError::GradientUnsupported);
                }
                // dL/dγ_k = Σ_{i<j} ω_ij [a_i (y_j - m_i) + a_j (y_i - m_j)] d²_ijk
                // with a_i = 2 r_i / (n S_i); fallback points are constant in γ.
                let scale = 2.0 / n as f64;
                let a: Vec<f64> = (0..n)
                    .map(|i| if den[i] > 0.0 { scale * residuals[i] / den[i] } else { 0.0 })
                    .collect();
                let dg = coords.len();
                let xg = self.gather(coords);
                let blocks: Vec<Vec<f64>> = (0..n.div_ceil(ROW_BLOCK))
                    .into_par_iter()
                    .map(|b| {
                        let mut acc = vec![0.0; dg];
                        for i in (b * ROW_BLOCK)..((b + 1) * ROW_BLOCK).min(n) {
                            if i + 1 >= n {
                                continue;
                            }
                            let base = pair_offset(n, i);
                            let xi = &xg[i * dg..(i + 1) * dg];
                            let (ai, mi, yi) = (a[i], fitted[i], y[i]);
                            for j in (i + 1)..n {
                                let c = omega[base + j - i - 1] * (ai * (y[j] - mi) + a[j] * (yi - fitted[j]));
                                if c == 0.0 {
                                    continue;
                                }
                                let xj = &xg[j * dg..(j + 1) * dg];
                                for k in 0..dg {
                                    let d = xi[k] - xj[k];
                                    acc[k] += c * d * d;
                                }
                            }
                        }
                        acc
                    })
                    .collect();
                let mut g = vec![0.0; t];
                for acc in &blocks {
                    for (k, &v) in coords.iter().zip(acc) {
                        g[*k] += v;
                    }
                }
                g
            }
        };

        Ok(LossReport { loss, gradient, residuals, fallback_points })
    }
}

/// Leave-one-out CV loss; fails if any point has no positive kernel weight.
pub fn loocv_loss(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    gamma: &Bandwidth,
    kind: KernelKind,
) -> Result<LossReport, KernelError> {
    LooCv::new(x, y)?.loss(gamma.as_slice(), kind, ZeroDenominatorPolicy::Error)
}

/// Leave-one-out CV loss and its gradient in `γ` (Gaussian kernel).
pub fn loocv_gradient(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    gamma: &Bandwidth,
) -> Result<LossReport, KernelError> {
    LooCv::new(x, y)?.loss_and_gradient(gamma.as_slice(), None, ZeroDenominatorPolicy::Error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, t: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, t), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..3.0)).collect();
        (x, y, g)
    }

    /// Rebuilds every leave-one-out fit from scratch.
    fn naive_loss(x: &Array2<f64>, y: &[f64], g: &[f64]) -> f64 {
        let n = y.len();
        let mut total = 0.0;
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut s = 0.0;
                for v in 0..g.len() {
                    s += g[v] * (x[[i, v]] - x[[j, v]]).powi(2);
                }
                num += (-s).exp() * y[j];
                den += (-s).exp();
            }
            total += (y[i] - num / den).powi(2);
        }
        total / n as f64
    }

    #[test]
    fn gaussian_values() {
        let g = Bandwidth::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gaussian_kernel(&[0.3, 1.0, 2.0], &[0.3, 1.0, 2.0], &g), 1.0);
        assert_eq!(gaussian_kernel(&[0.3, 1.0, 2.0], &[5.0, -7.0, 9.0], &Bandwidth::zeros(3)), 1.0);
        assert_relative_eq!(gaussian_kernel(&[1.0, 4.0, -2.0], &[0.0, 9.0, 3.0], &g), 0.367879441171, epsilon = 1e-9);
    }

    #[test]
    fn epanechnikov_values() {
        let g = Bandwidth::new(vec![1.0]).unwrap();
        assert_eq!(epanechnikov_kernel(&[0.2], &[0.2], &g), 1.0);
        assert_eq!(epanechnikov_kernel(&[0.0], &[2f64.sqrt()], &g), 0.0);
        assert_relative_eq!(epanechnikov_kernel(&[0.0], &[0.5], &g), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn bandwidth_validation() {
        assert!(Bandwidth::new(vec![1.0, -0.1]).is_err());
        assert!(Bandwidth::new(vec![f64::NAN]).is_err());
        assert_eq!(Bandwidth::new(vec![0.0, 2.0, 0.0, 1.0]).unwrap().support(), vec![1, 3]);
    }

    #[test]
    fn prediction_examples() {
        let x = array![[1.0], [2.0], [4.0]];
        let y = [1.0, 2.0, 6.0];
        let mean = nw_predict(&[0.0], x.view(), &y, &Bandwidth::zeros(1), KernelKind::Gaussian).unwrap();
        assert_relative_eq!(mean, 3.0, epsilon = 1e-15);

        let single = nw_predict(&[9.0], x.slice(ndarray::s![0..1, ..]), &y[..1], &Bandwidth::new(vec![1.0]).unwrap(), KernelKind::Gaussian).unwrap();
        assert_eq!(single, 1.0);

        let two = array![[1.0], [2.0]];
        let v = nw_predict(&[0.0], two.view(), &[0.0, 1.0], &Bandwidth::new(vec![1.0]).unwrap(), KernelKind::Gaussian).unwrap();
        assert_relative_eq!(v, 0.047425873177567, epsilon = 1e-12);

        let far = nw_predict(&[10.0], x.view(), &y, &Bandwidth::new(vec![1.0]).unwrap(), KernelKind::Epanechnikov);
        assert!(matches!(far, Err(KernelError::ZeroDenominator { .. })));
        let batch = nw_predict_batch(array![[10.0], [1.0]].view(), x.view(), &y, &Bandwidth::new(vec![1.0]).unwrap(), KernelKind::Epanechnikov).unwrap();
        assert_eq!(batch.fallback, vec![true, false]);
        assert_eq!(batch.values[0], 3.0);
    }

    #[test]
    fn loo_two_points_and_uniform_weights() {
        let x = array![[0.1, 3.0], [0.7, -1.0]];
        let y = [2.0, -0.5];
        for g in [[0.0, 0.0], [1.0, 0.3], [5.0, 2.0]] {
            let r = loocv_loss(x.view(), &y, &Bandwidth::new(g.to_vec()).unwrap(), KernelKind::Gaussian).unwrap();
            assert_relative_eq!(r.loss, 6.25, epsilon = 1e-12);
        }
        let (x, y, _) = random_instance(3, 9, 4);
        let n = y.len() as f64;
        let total: f64 = y.iter().sum();
        let expect = y.iter().map(|&yi| (yi - (total - yi) / (n - 1.0)).powi(2)).sum::<f64>() / n;
        let r = loocv_loss(x.view(), &y, &Bandwidth::zeros(4), KernelKind::Gaussian).unwrap();
        assert_relative_eq!(r.loss, expect, epsilon = 1e-12);
        assert_relative_eq!(r.loss, r.residuals.iter().map(|e| e * e).sum::<f64>() / n, epsilon = 1e-15);
    }

    #[test]
    fn loo_matches_naive_oracle() {
        let (x, y, g) = random_instance(11, 6, 3);
        let r = loocv_loss(x.view(), &y, &Bandwidth::new(g.clone()).unwrap(), KernelKind::Gaussian).unwrap();
        assert_relative_eq!(r.loss, naive_loss(&x, &y, &g), epsilon = 1e-12);
    }

    #[test]
    fn epanechnikov_loss_reports_empty_support() {
        let x = array![[0.0], [0.1], [10.0]];
        let r = loocv_loss(x.view(), &[1.0, 2.0, 3.0], &Bandwidth::new(vec![1.0]).unwrap(), KernelKind::Epanechnikov);
        assert_eq!(r.unwrap_err(), KernelError::ZeroDenominator { points: vec![2] });
        let engine = LooCv::new(x.view(), &[1.0, 2.0, 3.0]).unwrap();
        let fb = engine.loss(&[1.0], KernelKind::Epanechnikov, ZeroDenominatorPolicy::MeanFallback).unwrap();
        assert_eq!(fb.fallback_points, vec![2]);
        assert_relative_eq!(fb.residuals[2], 3.0 - 1.5);
        assert!(matches!(
            engine.loss_and_gradient(&[f64::NAN], None, ZeroDenominatorPolicy::Error),
            Err(KernelError::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10 {
            let (x, y, g) = random_instance(100 + seed, 8, 7);
            let engine = LooCv::new(x.view(), &y).unwrap();
            let r = engine.loss_and_gradient(&g, None, ZeroDenominatorPolicy::Error).unwrap();
            for k in 0..g.len() {
                let h = 1e-5;
                let (mut up, mut dn) = (g.clone(), g.clone());
                up[k] += h;
                dn[k] -= h;
                let fd = (naive_loss(&x, &y, &up) - naive_loss(&x, &y, &dn)) / (2.0 * h);
                let rel = (r.gradient[k] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "seed {seed} k {k}: {} vs {fd}", r.gradient[k]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_for_constant_response() {
        let (x, _, g) = random_instance(5, 7, 3);
        let r = loocv_gradient(x.view(), &[2.5; 7], &Bandwidth::new(g).unwrap()).unwrap();
        assert!(r.gradient.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_mask_skips_coordinates() {
        let (x, y, g) = random_instance(9, 10, 4);
        let engine = LooCv::new(x.view(), &y).unwrap();
        let full = engine.loss_and_gradient(&g, None, ZeroDenominatorPolicy::Error).unwrap();
        let part = engine.loss_and_gradient(&g, Some(&[true, false, true, false]), ZeroDenominatorPolicy::Error).unwrap();
        assert_eq!(part.gradient[1], 0.0);
        assert_eq!(part.gradient[0], full.gradient[0]);
        assert_eq!(part.gradient[2], full.gradient[2]);
        assert!(engine.loss_and_gradient(&g, None, ZeroDenominatorPolicy::Error).is_ok());
    }

    #[test]
    fn pairwise_diffs_shape() {
        let (x, _, _) = random_instance(2, 5, 3);
        let d = PairwiseDiffs::new(x.view());
        let m = d.materialize(1);
        for i in 0..5 {
            assert_eq!(m[[i, i]], 0.0);
            for j in 0..5 {
                assert_eq!(m[[i, j]], m[[j, i]]);
                assert!(m[[i, j]] >= 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn kernel_symmetry_and_bounds(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            g in prop::collection::vec(0.0f64..3.0, 4),
        ) {
            let g = Bandwidth::new(g).unwrap();
            let k1 = gaussian_kernel(&a, &b, &g);
            prop_assert_eq!(k1, gaussian_kernel(&b, &a, &g));
            prop_assert!(k1 <= 1.0 && k1 >= 0.0);
            let e = epanechnikov_kernel(&a, &b, &g);
            prop_assert_eq!(e, epanechnikov_kernel(&b, &a, &g));
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn kernel_decreases_in_gamma(d in 0.01f64..2.0, g0 in 0.0f64..2.0, step in 0.01f64..1.0) {
            let lo = gaussian_kernel(&[0.0], &[d], &Bandwidth::new(vec![g0]).unwrap());
            let hi = gaussian_kernel(&[0.0], &[d], &Bandwidth::new(vec![g0 + step]).unwrap());
            prop_assert!(hi < lo);
        }

        #[test]
        fn zero_bandwidth_feature_is_inert(seed in 0u64..500, extra in -3.0f64..3.0) {
            let (x, y, g) = random_instance(seed, 6, 2);
            let q = [0.1, -0.2];
            let base = nw_predict(&q, x.view(), &y, &Bandwidth::new(g.clone()).unwrap(), KernelKind::Gaussian).unwrap();
            let mut x3 = Array2::zeros((6, 3));
            for i in 0..6 {
                x3[[i, 0]] = x[[i, 0]];
                x3[[i, 1]] = x[[i, 1]];
                x3[[i, 2]] = extra * i as f64;
            }
            let g3 = Bandwidth::new(vec![g[0], g[1], 0.0]).unwrap();
            let ext = nw_predict(&[0.1, -0.2, 17.0], x3.view(), &y, &g3, KernelKind::Gaussian).unwrap();
            prop_assert!((base - ext).abs() <= 1e-12);
        }

        #[test]
        fn prediction_is_convex_combination(seed in 0u64..500) {
            let (x, y, g) = random_instance(seed, 7, 3);
            let v = nw_predict(&[0.0, 0.5, -0.5], x.view(), &y, &Bandwidth::new(g).unwrap(), KernelKind::Gaussian).unwrap();
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..200) {
            let (x, y, g) = random_instance(seed, 9, 3);
            let perm: Vec<usize> = (0..9).rev().collect();
            let xp = x.select(ndarray::Axis(0), &perm);
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let a = loocv_gradient(x.view(), &y, &Bandwidth::new(g.clone()).unwrap()).unwrap();
            let b = loocv_gradient(xp.view(), &yp, &Bandwidth::new(g).unwrap()).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1.0));
            for (u, v) in a.gradient.iter().zip(&b.gradient) {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }
}
