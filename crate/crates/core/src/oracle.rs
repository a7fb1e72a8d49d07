//! Closed-form reference quantities for the linear RBF model: the Gram
//! (tangent) kernel, the limiting Gaussian-process posterior of converged
//! modes, the variance scaling fit and exponential decay fits.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::models::RbfFeatureModel;

/// Rows are the feature vectors `phi(x_i)`.
pub fn feature_matrix(model: &RbfFeatureModel, xs: &[f64]) -> DMatrix<f64> {
    let p = model.n_params();
    DMatrix::from_fn(xs.len(), p, |i, k| {
        let d = xs[i] - model.centers()[k];
        (-d * d / (2.0 * model.bandwidth() * model.bandwidth())).exp()
    })
}

/// `Theta(x, x') = phi(x) . phi(x')`, the tangent kernel of the linear model.
pub fn kernel(model: &RbfFeatureModel, x: f64, y: f64) -> f64 {
    model.features(x).iter().zip(model.features(y)).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    /// Kernel matrix without jitter.
    pub raw: DMatrix<f64>,
    pub jitter: f64,
}

impl GramMatrix {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.raw.nrows();
        &self.raw + DMatrix::identity(n, n) * self.jitter
    }

    pub fn n(&self) -> usize {
        self.raw.nrows()
    }

    /// `1e-10 * trace / n`.
    pub fn default_jitter(raw: &DMatrix<f64>) -> f64 {
        1e-10 * raw.trace() / raw.nrows() as f64
    }

    /// Ratio of extreme absolute eigenvalues of the jittered matrix.
    pub fn condition_estimate(&self) -> f64 {
        let eig = self.matrix().symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.matrix()).ok_or_else(|| SimError::Numerical {
            message: format!("Gram matrix of size {} is not positive definite", self.n()),
            condition: self.condition_estimate(),
        })
    }
}

pub fn gram(model: &RbfFeatureModel, xs: &[f64], jitter: f64) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(SimError::Contract("Gram matrix of an empty input set".into()));
    }
    if !(jitter >= 0.0) {
        return Err(SimError::config("jitter", "must be >= 0"));
    }
    let f = feature_matrix(model, xs);
    let raw = &f * f.transpose();
    Ok(GramMatrix { raw, jitter })
}

/// The Gaussian process that converged modes follow when trained from
/// `w ~ N(0, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    model: RbfFeatureModel,
    xs: Vec<f64>,
    ys: DVector<f64>,
    sigma: f64,
    gram: GramMatrix,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// `jitter = None` uses [`GramMatrix::default_jitter`].
pub fn gp_posterior(model: &RbfFeatureModel, xs: &[f64], ys: &[f64], sigma: f64, jitter: Option<f64>) -> Result<GpPosterior> {
    if xs.len() != ys.len() {
        return Err(SimError::Contract("inputs and targets differ in length".into()));
    }
    if !(sigma >= 0.0) {
        return Err(SimError::config("sigma", "must be >= 0"));
    }
    let mut g = gram(model, xs, 0.0)?;
    g.jitter = jitter.unwrap_or_else(|| GramMatrix::default_jitter(&g.raw));
    let chol = g.cholesky()?;
    let ys = DVector::from_column_slice(ys);
    let alpha = chol.solve(&ys);
    Ok(GpPosterior {
        model: model.clone(),
        xs: xs.to_vec(),
        ys,
        sigma,
        gram: g,
        chol,
        alpha,
    })
}

impl GpPosterior {
    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `Theta(X, x)` as a column.
    fn cross(&self, x: f64) -> DVector<f64> {
        DVector::from_iterator(self.xs.len(), self.xs.iter().map(|&xi| kernel(&self.model, xi, x)))
    }

    /// `m(x) = Theta(x, X) Theta^-1 Y`.
    pub fn mean(&self, x: f64) -> f64 {
        self.cross(x).dot(&self.alpha)
    }

    /// Limit reached from a specific initialization `w0`:
    /// `f_w0(x) + Theta(x, X) Theta^-1 (Y - f_w0(X))`.
    pub fn mean_from_init(&self, w0: &[f64], x: f64) -> f64 {
        let resid = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().zip(self.ys.iter()).map(|(&xi, y)| y - self.model.predict(w0, xi)),
        );
        self.model.predict(w0, x) + self.cross(x).dot(&self.chol.solve(&resid))
    }

    /// `sigma^2 (Theta(x, x') - Theta(x, X) Theta^-1 Theta(X, x'))`.
    pub fn cov(&self, x: f64, y: f64) -> f64 {
        let cx = self.cross(x);
        let cy = self.cross(y);
        self.sigma * self.sigma * (kernel(&self.model, x, y) - cx.dot(&self.chol.solve(&cy)))
    }

    /// Covariance for an arbitrary initial-function kernel `K`:
    /// `K(x,x') + T(x) K(X,X) T(x')^T - T(x) K(X,x') - T(x') K(X,x)` with
    /// `T(x) = Theta(x, X) Theta^-1`.
    pub fn cov_general<K>(&self, init_kernel: K, x: f64, y: f64) -> f64
    where
        K: Fn(f64, f64) -> f64,
    {
        let n = self.xs.len();
        let tx = self.chol.solve(&self.cross(x));
        let ty = self.chol.solve(&self.cross(y));
        let kxx = DMatrix::from_fn(n, n, |i, j| init_kernel(self.xs[i], self.xs[j]));
        let k_x = DVector::from_iterator(n, self.xs.iter().map(|&xi| init_kernel(xi, x)));
        let k_y = DVector::from_iterator(n, self.xs.iter().map(|&xi| init_kernel(xi, y)));
        init_kernel(x, y) + tx.dot(&(&kxx * &ty)) - tx.dot(&k_y) - ty.dot(&k_x)
    }

    pub fn cov_matrix(&self, probes: &[f64]) -> DMatrix<f64> {
        let n = probes.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.cov(probes[i], probes[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScaling {
    /// OLS slope of `ln variance` against `ln K`.
    pub slope: f64,
    pub intercept: f64,
    /// `(k_small, k_large, var_small / var_large)` for every pair.
    pub ratios: Vec<(usize, usize, f64)>,
}

pub fn variance_ratio_check(per_k: &BTreeMap<usize, f64>) -> Result<VarianceScaling> {
    if per_k.len() < 3 {
        return Err(SimError::config("per_k_variances", "need at least three distinct K values"));
    }
    if per_k.iter().any(|(&k, &v)| k == 0 || !(v > 0.0)) {
        return Err(SimError::config("per_k_variances", "K and variances must be positive"));
    }
    let pts: Vec<(f64, f64)> = per_k.iter().map(|(&k, &v)| ((k as f64).ln(), v.ln())).collect();
    let (slope, intercept, _) = ols(&pts);
    let entries: Vec<_> = per_k.iter().collect();
    let mut ratios = Vec::new();
    for (i, (&ka, &va)) in entries.iter().enumerate() {
        for (&kb, &vb) in &entries[i + 1..] {
            ratios.push((ka, kb, va / vb));
        }
    }
    Ok(VarianceScaling {
        slope,
        intercept,
        ratios,
    })
}

/// Returns `(slope, intercept, r_squared)`; `r_squared` is `None` when `y` is constant.
fn ols(pts: &[(f64, f64)]) -> (f64, f64, Option<f64>) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = (syy > 0.0).then(|| {
        let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    });
    (slope, intercept, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Decay rate per round (negated slope of the log-loss).
    pub rate: f64,
    pub intercept: f64,
    /// `None` for a degenerate (flat) fit.
    pub r_squared: Option<f64>,
    /// Inclusive round range used for the fit.
    pub window: (usize, usize),
}

impl DecayFit {
    pub fn is_degenerate(&self) -> bool {
        self.r_squared.is_none()
    }
}

/// Share of the trace treated as the final plateau.
pub const PLATEAU_FRACTION: f64 = 0.2;
/// Relative margin above the plateau level below which rounds count as floor.
pub const FLOOR_MARGIN: f64 = 0.05;

/// Fits `ln loss = intercept - rate * round` over the prefix of the trace
/// that lies above the floor. The floor is the `floor_quantile` quantile of
/// the last 20% of losses, widened by 5%; `0.5` gives the median.
pub fn fit_decay(trace: &[(usize, f64)], floor_quantile: f64) -> Result<DecayFit> {
    if trace.len() < 5 {
        return Err(SimError::Fit(format!("need at least 5 rounds, got {}", trace.len())));
    }
    if !(0.0..=1.0).contains(&floor_quantile) {
        return Err(SimError::config("floor_quantile", "must lie in [0, 1]"));
    }
    if trace.iter().any(|&(_, l)| !(l > 0.0 && l.is_finite())) {
        return Err(SimError::Fit("losses must be positive and finite".into()));
    }
    let first = trace[0].1;
    if trace.iter().all(|&(_, l)| l == first) {
        return Ok(DecayFit {
            rate: 0.0,
            intercept: first.ln(),
            r_squared: None,
            window: (trace[0].0, trace[trace.len() - 1].0),
        });
    }
    let tail_len = ((trace.len() as f64 * PLATEAU_FRACTION).ceil() as usize).max(1);
    let mut tail: Vec<f64> = trace[trace.len() - tail_len..].iter().map(|p| p.1).collect();
    tail.sort_by(f64::total_cmp);
    let floor = quantile(&tail, floor_quantile) * (1.0 + FLOOR_MARGIN);
    let end = trace.iter().position(|&(_, l)| l < floor).unwrap_or(trace.len());
    if end < 2 {
        return Err(SimError::Fit("fewer than two rounds above the loss floor".into()));
    }
    let pts: Vec<(f64, f64)> = trace[..end].iter().map(|&(r, l)| (r as f64, l.ln())).collect();
    let (slope, intercept, r_squared) = ols(&pts);
    Ok(DecayFit {
        rate: -slope,
        intercept,
        r_squared,
        window: (trace[0].0, trace[end - 1].0),
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One probe point of an oracle-versus-simulation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub probe_x: f64,
    pub m_oracle: f64,
    pub mean_empirical: f64,
    pub k_diag_oracle: f64,
    pub var_empirical: f64,
    pub n_repeats: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> RbfFeatureModel {
        RbfFeatureModel::new(vec![-0.5, 0.1, 0.6], 0.4).unwrap()
    }

    #[test]
    fn gram_single_point() {
        let m = RbfFeatureModel::sample(100, 0.08, 1).unwrap();
        let g = gram(&m, &[0.3], 0.5).unwrap();
        let phi = m.features(0.3);
        let norm2: f64 = phi.iter().map(|v| v * v).sum();
        assert!((g.matrix()[(0, 0)] - (norm2 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn gram_duplicate_inputs_share_rows() {
        let g = gram(&small(), &[0.2, -0.4, 0.2], 0.0).unwrap();
        assert_eq!(g.raw.row(0), g.raw.row(2));
    }

    #[test]
    fn gram_equals_explicit_feature_product() {
        let m = RbfFeatureModel::sample(100, 0.08, 2).unwrap();
        let xs = [-0.9, -0.3, 0.05, 0.4, 0.77];
        let g = gram(&m, &xs, 0.0).unwrap();
        let f = DMatrix::from_fn(5, 100, |i, k| m.features(xs[i])[k]);
        let explicit = &f * f.transpose();
        assert!((g.raw - explicit).amax() <= 1e-12);
    }

    #[test]
    fn interpolates_and_collapses_at_training_points() {
        let m = RbfFeatureModel::sample(100, 0.08, 3).unwrap();
        let xs = [-0.6, 0.0, 0.5];
        let ys = [0.4, -1.0, 2.0];
        let gp = gp_posterior(&m, &xs, &ys, 1.0, None).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert!((gp.mean(*x) - y).abs() < 1e-6);
            assert!(gp.cov(*x, *x).abs() < 1e-6);
        }
        assert!(gp.cov(0.25, 0.25) > 0.01);
    }

    #[test]
    fn mean_from_zero_init_is_the_plain_mean() {
        let m = small();
        let gp = gp_posterior(&m, &[-0.2, 0.4], &[1.0, -0.5], 1.0, Some(0.0)).unwrap();
        for x in [-0.9, 0.0, 0.3] {
            assert!((gp.mean_from_init(&[0.0; 3], x) - gp.mean(x)).abs() < 1e-12);
        }
    }

    /// Weight-space oracle: with `w ~ N(0, s^2 I)` conditioned on `F w = y`
    /// exactly, the posterior mean is `F^+ y` and the covariance is
    /// `s^2 (I - F^+ F)`.
    fn brute_force(m: &RbfFeatureModel, xs: &[f64], ys: &[f64], sigma: f64, probes: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let f = DMatrix::from_fn(xs.len(), m.n_params(), |i, k| m.features(xs[i])[k]);
        let pinv = f.clone().pseudo_inverse(1e-14).unwrap();
        let w_mean = &pinv * DVector::from_column_slice(ys);
        let p = m.n_params();
        let w_cov = (DMatrix::identity(p, p) - &pinv * &f) * (sigma * sigma);
        let phi = DMatrix::from_fn(probes.len(), p, |i, k| m.features(probes[i])[k]);
        let mean = (&phi * w_mean).iter().copied().collect();
        (mean, &phi * w_cov * phi.transpose())
    }

    #[test]
    fn matches_weight_space_oracle() {
        let m = small();
        let (xs, ys) = ([-0.3, 0.45], [0.8, -0.2]);
        let probes = [-1.0, -0.3, 0.0, 0.2, 0.45, 0.9];
        let gp = gp_posterior(&m, &xs, &ys, 1.3, Some(0.0)).unwrap();
        let (mean, cov) = brute_force(&m, &xs, &ys, 1.3, &probes);
        for (i, &x) in probes.iter().enumerate() {
            assert!((gp.mean(x) - mean[i]).abs() <= 1e-8);
            for (j, &y) in probes.iter().enumerate() {
                assert!((gp.cov(x, y) - cov[(i, j)]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn general_covariance_reduces_to_special_case() {
        let m = small();
        let gp = gp_posterior(&m, &[-0.3, 0.45], &[0.8, -0.2], 0.7, Some(0.0)).unwrap();
        let k = |a: f64, b: f64| 0.49 * kernel(&m, a, b);
        for (x, y) in [(0.0, 0.1), (-0.8, 0.6), (0.3, 0.3)] {
            assert!((gp.cov_general(k, x, y) - gp.cov(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_gram_is_a_numerical_error() {
        let m = small();
        match gp_posterior(&m, &[0.1, 0.1], &[0.0, 1.0], 1.0, Some(0.0)) {
            Err(SimError::Numerical { condition, .. }) => assert!(condition > 1e10),
            other => panic!("expected numerical error, got {other:?}"),
        }
        assert!(gp_posterior(&m, &[0.1, 0.1], &[0.0, 1.0], 1.0, None).is_ok());
    }

    proptest! {
        #[test]
        fn posterior_covariance_is_psd(seed in 0u64..1000, probes in proptest::collection::vec(-1.0f64..1.0, 1..8)) {
            let m = RbfFeatureModel::sample(20, 0.15, seed).unwrap();
            let gp = gp_posterior(&m, &[-0.7, -0.1, 0.5], &[0.0, 1.0, -1.0], 1.0, None).unwrap();
            let eig = gp.cov_matrix(&probes).symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-8);
        }
    }

    #[test]
    fn variance_slope_examples() {
        let exact: BTreeMap<_, _> = [(1, 0.4), (2, 0.2), (4, 0.1)].into();
        let s = variance_ratio_check(&exact).unwrap();
        assert!((s.slope + 1.0).abs() < 1e-12);
        assert_eq!(s.ratios[0], (1, 2, 2.0));

        let flat: BTreeMap<_, _> = [(1, 0.3), (5, 0.3), (9, 0.3)].into();
        assert!(variance_ratio_check(&flat).unwrap().slope.abs() < 1e-12);

        let published: BTreeMap<_, _> = [(1, 0.0496), (2, 0.0115), (10, 0.0063), (20, 0.0045), (40, 0.0042)].into();
        assert!((variance_ratio_check(&published).unwrap().slope + 0.6038).abs() < 1e-4);

        let two: BTreeMap<_, _> = [(1, 0.4), (2, 0.2)].into();
        assert!(variance_ratio_check(&two).is_err());
    }

    #[test]
    fn decay_fit_on_exact_exponential() {
        let trace: Vec<_> = (0..60).map(|r| (r, 2.0 * (-0.3 * r as f64).exp())).collect();
        let fit = fit_decay(&trace, 0.5).unwrap();
        assert!((fit.rate - 0.3).abs() < 1e-6);
        assert!(fit.r_squared.unwrap() > 0.9999);
        assert!(fit.window.1 < 59);
    }

    #[test]
    fn decay_fit_excludes_floor() {
        let trace: Vec<_> = (0..100).map(|r| (r, (-0.2 * r as f64).exp() + 1e-3)).collect();
        let fit = fit_decay(&trace, 0.5).unwrap();
        assert!(fit.window.1 < 60, "{fit:?}");
        assert!(fit.rate > 0.1, "{fit:?}");
    }

    #[test]
    fn decay_fit_degenerate_and_errors() {
        let flat: Vec<_> = (0..10).map(|r| (r, 0.7)).collect();
        let fit = fit_decay(&flat, 0.5).unwrap();
        assert_eq!(fit.rate, 0.0);
        assert!(fit.is_degenerate());
        assert!(fit_decay(&flat[..4], 0.5).is_err());
        // Drops straight onto the floor: nothing left to fit.
        let cliff: Vec<_> = (0..10).map(|r| (r, if r == 0 { 1.0 } else { 1e-6 })).collect();
        assert!(matches!(fit_decay(&cliff, 0.5), Err(SimError::Fit(_))));
    }
}
