//! Ensemble prediction and evaluation harnesses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledPoint, Task};
use crate::error::{Result, SimError};
use crate::exec::{self, ExecMode};
use crate::federation::Ensemble;
use crate::models::{argmax, Model, WeightVector};
use crate::rng::{derive_seed, labels};

/// Averaged ensemble output: the mean prediction for regression, the mean
/// class-probability vector for classification.
pub fn ensemble_predict(ensemble: &Ensemble, model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.output_dim()];
    for w in &ensemble.modes {
        let out = model.predict_proba(w, x)?;
        acc.iter_mut().zip(&out).for_each(|(a, o)| *a += o);
    }
    let k = ensemble.k() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Predicted class of the probability-averaged ensemble.
pub fn ensemble_label(ensemble: &Ensemble, model: &Model, x: &[f64]) -> Result<usize> {
    if model.task() != Task::Classification {
        return Err(SimError::Unsupported("labels of a regression ensemble".into()));
    }
    Ok(argmax(&ensemble_predict(ensemble, model, x)?))
}

pub fn ensemble_accuracy(ensemble: &Ensemble, model: &Model, test: &[LabeledPoint]) -> Result<f64> {
    if test.is_empty() {
        return Err(SimError::Contract("accuracy over an empty test set".into()));
    }
    let mut correct = 0usize;
    for p in test {
        correct += usize::from(ensemble_label(ensemble, model, &p.x)? == p.label());
    }
    Ok(correct as f64 / test.len() as f64)
}

/// `n` evenly spaced points on `[-1, 1]`.
pub fn toy_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub k: usize,
    pub n_repeats: usize,
    pub bias_sq: f64,
    /// `sqrt(bias_sq)`.
    pub bias: f64,
    pub variance: f64,
}

impl BiasVarianceReport {
    /// `predictions[j][i]` is repeat `j`'s prediction at grid point `i`;
    /// `target[i]` the noiseless target there.
    pub fn from_predictions(k: usize, predictions: &[Vec<f64>], target: &[f64]) -> Result<Self> {
        let n_rep = predictions.len();
        if n_rep < 2 {
            return Err(SimError::config("n_repeats", "need at least two repeats"));
        }
        let n = target.len();
        if n == 0 || predictions.iter().any(|p| p.len() != n) {
            return Err(SimError::Contract("prediction rows must match the test grid".into()));
        }
        let mean: Vec<f64> = (0..n)
            .map(|i| predictions.iter().map(|p| p[i]).sum::<f64>() / n_rep as f64)
            .collect();
        let bias_sq = mean.iter().zip(target).map(|(h, y)| (y - h).powi(2)).sum::<f64>() / n as f64;
        let variance = predictions
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(h, m)| (m - h).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n * n_rep) as f64;
        Ok(Self {
            k,
            n_repeats: n_rep,
            bias_sq,
            bias: bias_sq.sqrt(),
            variance,
        })
    }
}

/// Monte-Carlo bias-variance decomposition. `runner` receives the repeat's
/// seed and returns the trained predictor evaluated on the test grid; repeats
/// run in parallel and are reduced in repeat order.
pub fn bias_variance<F>(runner: F, target: &[f64], k: usize, n_repeats: usize, seed: u64, mode: ExecMode) -> Result<BiasVarianceReport>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync + Send,
{
    if n_repeats < 2 {
        return Err(SimError::config("n_repeats", "need at least two repeats"));
    }
    let predictions = exec::try_map_indexed(mode, n_repeats, |j| runner(derive_seed(seed, &labels::repeat(j))))?;
    BiasVarianceReport::from_predictions(k, &predictions, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub accuracies: Vec<f64>,
    pub acc_max: f64,
    pub acc_min: f64,
    /// Mean predictive entropy in nats, over test points and modes.
    pub avg_entropy: f64,
}

impl ModeStats {
    /// `probs[k][i]` is mode `k`'s class distribution at test point `i`.
    pub fn from_probabilities(probs: &[Vec<Vec<f64>>], labels: &[usize]) -> Result<Self> {
        if probs.is_empty() || labels.is_empty() || probs.iter().any(|p| p.len() != labels.len()) {
            return Err(SimError::Contract("need one distribution per mode and test point".into()));
        }
        let accuracies: Vec<f64> = probs
            .iter()
            .map(|mode| {
                let hits = mode.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
                hits as f64 / labels.len() as f64
            })
            .collect();
        let entropy_sum: f64 = probs.iter().flatten().map(|p| entropy(p)).sum();
        Ok(Self {
            acc_max: accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            acc_min: accuracies.iter().copied().fold(f64::INFINITY, f64::min),
            avg_entropy: entropy_sum / (probs.len() * labels.len()) as f64,
            accuracies,
        })
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn mode_stats(ensemble: &Ensemble, model: &Model, test: &[LabeledPoint]) -> Result<ModeStats> {
    if model.task() != Task::Classification {
        return Err(SimError::Unsupported("mode statistics need a classification model".into()));
    }
    let probs = ensemble
        .modes
        .iter()
        .map(|w| test.iter().map(|p| model.predict_proba(w, &p.x)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(LabeledPoint::label).collect();
    ModeStats::from_probabilities(&probs, &labels)
}

/// Training loss over the affine plane through three weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub origin: WeightVector,
    /// Orthonormal basis of the plane.
    pub basis: [WeightVector; 2],
    /// Plane coordinates of the anchors a, b, c.
    pub anchor_coords: [(f64, f64); 3],
    pub us: Vec<f64>,
    pub vs: Vec<f64>,
    /// `loss[i][j]` at `(us[i], vs[j])`.
    pub loss: Vec<Vec<f64>>,
    pub log_loss: Vec<Vec<f64>>,
}

impl SurfaceGrid {
    pub fn weights_at(&self, u: f64, v: f64) -> WeightVector {
        let mut w = self.origin.clone();
        w.axpy(u, &self.basis[0]);
        w.axpy(v, &self.basis[1]);
        w
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = crate::metrics::csv_writer(path)?;
        for (i, &u) in self.us.iter().enumerate() {
            for (j, &v) in self.vs.iter().enumerate() {
                out.serialize(SurfaceRow {
                    u,
                    v,
                    loss: self.loss[i][j],
                    log_loss: self.log_loss[i][j],
                })
                .map_err(|e| crate::metrics::csv_error(path, e))?;
            }
        }
        out.flush().map_err(|e| SimError::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SurfaceRow {
    u: f64,
    v: f64,
    loss: f64,
    log_loss: f64,
}

/// Evaluates the loss on a `grid_n x grid_n` lattice of the plane spanned by
/// `w_a`, `w_b`, `w_c`, covering the anchors' bounding box widened on each
/// side by `margin` times its extent.
pub fn loss_surface_projection(
    w_a: &WeightVector,
    w_b: &WeightVector,
    w_c: &WeightVector,
    model: &Model,
    data: &[LabeledPoint],
    grid_n: usize,
    margin: f64,
    mode: ExecMode,
) -> Result<SurfaceGrid> {
    for w in [w_a, w_b, w_c] {
        model.check_weights(w)?;
    }
    if grid_n < 2 {
        return Err(SimError::config("grid_n", "must be >= 2"));
    }
    if !(margin >= 0.0) {
        return Err(SimError::config("margin", "must be >= 0"));
    }
    if data.is_empty() {
        return Err(SimError::Contract("surface over an empty dataset".into()));
    }
    let mut e1 = w_b.clone();
    e1.axpy(-1.0, w_a);
    let mut e2 = w_c.clone();
    e2.axpy(-1.0, w_a);
    let scale = e1.norm().max(e2.norm());
    let n1 = e1.norm();
    if !(n1 > 1e-12 * scale.max(1.0)) {
        return Err(SimError::DegeneratePlane("first two anchors coincide".into()));
    }
    e1.iter_mut().for_each(|v| *v /= n1);
    let proj = e2.dot(&e1);
    e2.axpy(-proj, &e1);
    let n2 = e2.norm();
    if !(n2 > 1e-10 * scale) {
        return Err(SimError::DegeneratePlane("anchors are collinear".into()));
    }
    e2.iter_mut().for_each(|v| *v /= n2);

    let coords = |w: &WeightVector| {
        let d: Vec<f64> = w.iter().zip(w_a.iter()).map(|(x, o)| x - o).collect();
        (e1.dot(&d), e2.dot(&d))
    };
    let anchor_coords = [(0.0, 0.0), coords(w_b), coords(w_c)];
    let axis = |pick: fn(&(f64, f64)) -> f64| {
        let lo = anchor_coords.iter().map(pick).fold(f64::INFINITY, f64::min);
        let hi = anchor_coords.iter().map(pick).fold(f64::NEG_INFINITY, f64::max);
        let pad = margin * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        (0..grid_n)
            .map(|i| lo + (hi - lo) * i as f64 / (grid_n - 1) as f64)
            .collect::<Vec<_>>()
    };
    let us = axis(|c| c.0);
    let vs = axis(|c| c.1);

    let mut grid = SurfaceGrid {
        origin: w_a.clone(),
        basis: [e1, e2],
        anchor_coords,
        us,
        vs,
        loss: Vec::new(),
        log_loss: Vec::new(),
    };
    let flat = exec::map_indexed(mode, grid_n * grid_n, |idx| {
        let w = grid.weights_at(grid.us[idx / grid_n], grid.vs[idx % grid_n]);
        model.loss(&w, data)
    });
    grid.loss = flat.chunks(grid_n).map(<[f64]>::to_vec).collect();
    grid.log_loss = grid
        .loss
        .iter()
        .map(|row| row.iter().map(|l| l.max(f64::MIN_POSITIVE).ln()).collect())
        .collect();
    Ok(grid)
}

/// One row of the bias-variance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceRow {
    pub algo: String,
    pub k: usize,
    pub seed_base: u64,
    pub n_repeats: usize,
    pub bias_sq: f64,
    pub bias: f64,
    pub variance: f64,
}

impl BiasVarianceRow {
    pub fn new(algo: &str, seed_base: u64, r: &BiasVarianceReport) -> Self {
        Self {
            algo: algo.to_string(),
            k: r.k,
            seed_base,
            n_repeats: r.n_repeats,
            bias_sq: r.bias_sq,
            bias: r.bias,
            variance: r.variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStatsRow {
    pub algo: String,
    pub k: usize,
    pub seed_base: u64,
    pub acc_max: f64,
    pub acc_min: f64,
    pub acc_mean: f64,
    pub avg_entropy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpModel, RbfFeatureModel};
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, Normal};

    fn rbf() -> Model {
        Model::Rbf(RbfFeatureModel::new(vec![-0.5, 0.0, 0.5], 0.3).unwrap())
    }

    #[test]
    fn ensemble_mean_regression() {
        let model = Model::Rbf(RbfFeatureModel::new(vec![0.0], 1.0).unwrap());
        let ens = Ensemble::new(vec![
            WeightVector::from(vec![0.1]),
            WeightVector::from(vec![0.2]),
            WeightVector::from(vec![0.6]),
        ])
        .unwrap();
        let out = ensemble_predict(&ens, &model, &[0.0]).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);

        let single = Ensemble::new(vec![WeightVector::from(vec![0.7])]).unwrap();
        let w = &single.modes[0];
        assert_eq!(ensemble_predict(&single, &model, &[0.2]).unwrap(), model.predict(w, &[0.2]).unwrap());
    }

    #[test]
    fn ensemble_is_mode_order_invariant() {
        let model = Model::Mlp(MlpModel::classifier(2, 3).unwrap());
        let mut rng = rng_from_seed(4);
        let modes: Vec<_> = (0..4).map(|_| model.init_weights(&Default::default(), &mut rng)).collect();
        let a = Ensemble::new(modes.clone()).unwrap();
        let mut rev = modes;
        rev.swap(0, 3);
        let b = Ensemble::new(rev).unwrap();
        // Summation order changes, so compare to rounding.
        let pa = ensemble_predict(&a, &model, &[0.3, -0.1]).unwrap();
        let pb = ensemble_predict(&b, &model, &[0.3, -0.1]).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bias_variance_edge_cases() {
        let target = vec![0.0, 1.0, -1.0];
        let same = vec![target.clone(); 5];
        let r = BiasVarianceReport::from_predictions(1, &same, &target).unwrap();
        assert_eq!((r.bias_sq, r.variance), (0.0, 0.0));

        let shifted = vec![vec![0.5, 1.5, -0.5]; 3];
        let r = BiasVarianceReport::from_predictions(1, &shifted, &target).unwrap();
        assert!((r.bias_sq - 0.25).abs() < 1e-15);
        assert_eq!(r.variance, 0.0);
        assert!(BiasVarianceReport::from_predictions(1, &shifted[..1], &target).is_err());
    }

    #[test]
    fn bias_variance_recovers_additive_structure() {
        let grid = toy_grid(51);
        let target: Vec<f64> = grid.iter().map(|x| x * x).collect();
        let b = 0.3;
        let noise = Normal::new(0.0, 0.2).unwrap();
        let r = bias_variance(
            |seed| {
                let mut rng = rng_from_seed(seed);
                Ok(target.iter().map(|y| y + b + noise.sample(&mut rng)).collect())
            },
            &target,
            1,
            2000,
            7,
            ExecMode::Parallel,
        )
        .unwrap();
        assert!((r.bias_sq - b * b).abs() < 0.005, "{r:?}");
        assert!((r.variance - 0.04).abs() < 0.002, "{r:?}");
    }

    #[test]
    fn entropy_hand_computation() {
        let probs = vec![vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 0.0], vec![0.5, 0.5]]];
        let s = ModeStats::from_probabilities(&probs, &[0, 1, 0, 1]).unwrap();
        assert!((s.avg_entropy - 3.0 * 2f64.ln() / 4.0).abs() < 1e-15);
        assert_eq!(s.acc_max, s.acc_min);

        let uniform = vec![vec![vec![0.25; 4]; 3]; 2];
        let s = ModeStats::from_probabilities(&uniform, &[0, 1, 2]).unwrap();
        assert!((s.avg_entropy - 4f64.ln()).abs() < 1e-15);

        let onehot = vec![vec![vec![0.0, 1.0]; 2]];
        assert_eq!(ModeStats::from_probabilities(&onehot, &[1, 1]).unwrap().avg_entropy, 0.0);
    }

    #[test]
    fn mode_stats_rejects_regression() {
        let ens = Ensemble::new(vec![WeightVector::zeros(3)]).unwrap();
        let test = vec![LabeledPoint::new(vec![0.0], 0.0)];
        assert!(matches!(mode_stats(&ens, &rbf(), &test), Err(SimError::Unsupported(_))));
    }

    #[test]
    fn mode_stats_bounds() {
        let model = Model::Mlp(MlpModel::classifier(2, 3).unwrap());
        let mut rng = rng_from_seed(1);
        let ens = Ensemble::new((0..3).map(|_| model.init_weights(&Default::default(), &mut rng)).collect()).unwrap();
        let test: Vec<_> = (0..20)
            .map(|i| LabeledPoint::new(vec![(i as f64 * 0.1).sin(), (i as f64 * 0.3).cos()], (i % 3) as f64))
            .collect();
        let s = mode_stats(&ens, &model, &test).unwrap();
        assert!(s.acc_min <= s.mean_accuracy() && s.mean_accuracy() <= s.acc_max);
        assert!(s.avg_entropy >= 0.0 && s.avg_entropy <= 3f64.ln());
    }

    fn anchors() -> [WeightVector; 3] {
        [
            WeightVector::from(vec![0.1, -0.3, 0.8]),
            WeightVector::from(vec![1.0, 0.2, 0.0]),
            WeightVector::from(vec![-0.4, 0.9, 0.5]),
        ]
    }

    fn quad_data() -> Vec<LabeledPoint> {
        [(-0.6, 0.3), (-0.1, -0.2), (0.4, 0.7), (0.9, 0.1)]
            .iter()
            .map(|&(x, y)| LabeledPoint::new(vec![x], y))
            .collect()
    }

    #[test]
    fn surface_matches_direct_evaluation() {
        let [a, b, c] = anchors();
        let data = quad_data();
        let model = rbf();
        let g = loss_surface_projection(&a, &b, &c, &model, &data, 9, 0.2, ExecMode::Parallel).unwrap();
        assert_eq!(model.loss(&g.weights_at(0.0, 0.0), &data), model.loss(&a, &data));
        for (i, &u) in g.us.iter().enumerate() {
            for (j, &v) in g.vs.iter().enumerate() {
                let direct = model.loss(&g.weights_at(u, v), &data);
                assert!((g.loss[i][j] - direct).abs() <= 1e-10);
            }
        }
        for (k, w) in [&b, &c].into_iter().enumerate() {
            let (u, v) = g.anchor_coords[k + 1];
            assert!(g.weights_at(u, v).distance(w) < 1e-12);
        }
    }

    #[test]
    fn surface_is_flat_for_constant_loss() {
        // Inputs far from every center: all features underflow to zero, so the
        // model predicts 0 for any weights and the loss on zero targets is 0.
        let [a, b, c] = anchors();
        let model = Model::Rbf(RbfFeatureModel::new(vec![0.0, 0.5, 1.0], 0.1).unwrap());
        let far: Vec<_> = quad_data().iter().map(|p| LabeledPoint::new(vec![p.x[0] - 100.0], 0.0)).collect();
        let g = loss_surface_projection(&a, &b, &c, &model, &far, 5, 0.1, ExecMode::Sequential).unwrap();
        assert!(g.loss.iter().flatten().all(|&l| l == 0.0));
        assert!(g.log_loss.iter().flatten().all(|&l| l == g.log_loss[0][0]));
    }

    #[test]
    fn collinear_anchors_are_rejected() {
        let a = WeightVector::from(vec![0.0, 0.0, 0.0]);
        let b = WeightVector::from(vec![1.0, 1.0, 1.0]);
        let c = WeightVector::from(vec![2.0, 2.0, 2.0]);
        let err = loss_surface_projection(&a, &b, &c, &rbf(), &quad_data(), 4, 0.1, ExecMode::Sequential);
        assert!(matches!(err, Err(SimError::DegeneratePlane(_))));
        let err = loss_surface_projection(&a, &a, &c, &rbf(), &quad_data(), 4, 0.1, ExecMode::Sequential);
        assert!(matches!(err, Err(SimError::DegeneratePlane(_))));
    }
}
