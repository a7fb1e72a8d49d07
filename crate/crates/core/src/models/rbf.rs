use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledPoint;
use crate::error::{Result, SimError};
use crate::rng::rng_from_seed;

/// Linear model over fixed Gaussian bumps:
/// `f(x) = sum_k w_k exp(-(x - c_k)^2 / (2 b^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfFeatureModel {
    centers: Vec<f64>,
    bandwidth: f64,
}

impl RbfFeatureModel {
    pub const DEFAULT_CENTERS: usize = 100;
    pub const DEFAULT_BANDWIDTH: f64 = 0.08;

    pub fn new(centers: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(SimError::config("model.n_centers", "must be >= 1"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SimError::config("model.bandwidth", "must be positive"));
        }
        Ok(Self { centers, bandwidth })
    }

    /// Centers drawn uniformly from `[-1, 1]`.
    pub fn sample(n_centers: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let centers = (0..n_centers).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(centers, bandwidth)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn n_params(&self) -> usize {
        self.centers.len()
    }

    pub fn features(&self, x: f64) -> Vec<f64> {
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        self.centers
            .iter()
            .map(|c| (-(x - c) * (x - c) / denom).exp())
            .collect()
    }

    pub fn predict(&self, w: &[f64], x: f64) -> f64 {
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        self.centers
            .iter()
            .zip(w)
            .map(|(c, wk)| wk * (-(x - c) * (x - c) / denom).exp())
            .sum()
    }

    pub(crate) fn loss(&self, w: &[f64], batch: &[LabeledPoint]) -> f64 {
        let sse: f64 = batch
            .iter()
            .map(|p| {
                let r = self.predict(w, p.x[0]) - p.y;
                r * r
            })
            .sum();
        sse / (2.0 * batch.len() as f64)
    }

    pub(crate) fn loss_grad_into(&self, w: &[f64], batch: &[LabeledPoint], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = batch.len() as f64;
        let mut sse = 0.0;
        for p in batch {
            let phi = self.features(p.x[0]);
            let r = phi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - p.y;
            sse += r * r;
            grad.iter_mut().zip(&phi).for_each(|(g, f)| *g += r * f / n);
        }
        sse / (2.0 * n)
    }
}
