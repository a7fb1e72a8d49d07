use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, WeightVector};
use crate::data::{ClientDataset, LabeledPoint};
use crate::error::{Result, SimError};
use crate::rng::rng_from_seed;

/// Hyperparameters of one client's local optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    /// Local epochs `tau`.
    pub epochs: usize,
    /// Step size `eta`.
    pub step: f64,
    /// Proximal coefficient; zero disables the term.
    pub prox_mu: f64,
    /// Gaussian-prior coefficient, i.e. L2 regularization.
    pub l2_prior: f64,
    /// Mini-batch size; `None` means full-batch gradient descent.
    pub batch_size: Option<usize>,
}

impl LocalTraining {
    pub fn full_batch(epochs: usize, step: f64) -> Self {
        Self {
            epochs,
            step,
            prox_mu: 0.0,
            l2_prior: 0.0,
            batch_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SimError::config("tau", "must be >= 1"));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(SimError::config("eta", "must be finite and >= 0"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(SimError::config("prox_mu", "must be >= 0"));
        }
        if !(self.l2_prior >= 0.0) {
            return Err(SimError::config("l2_prior", "must be >= 0"));
        }
        if self.batch_size == Some(0) {
            return Err(SimError::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Runs `epochs` passes of gradient descent on
/// `loss(w) + prox_mu/2 |w - anchor|^2 + l2_prior/2 |w|^2`
/// starting from `w0` and returns the final weights.
///
/// `batch_seed` only matters for mini-batch training. The anchor defaults to `w0`.
pub fn local_training(
    model: &Model,
    w0: &WeightVector,
    data: &ClientDataset,
    cfg: &LocalTraining,
    anchor: Option<&WeightVector>,
    batch_seed: u64,
) -> Result<WeightVector> {
    cfg.validate()?;
    model.check_weights(w0)?;
    if data.is_empty() {
        return Err(SimError::Contract(format!("client {} holds no data", data.client_id)));
    }
    let anchor: &[f64] = anchor.map_or(w0, |a| a);
    if anchor.len() != w0.len() {
        return Err(SimError::Contract("proximal anchor has the wrong dimension".into()));
    }

    let mut w = w0.clone();
    let mut grad = vec![0.0; w.len()];
    let mut step = |w: &mut WeightVector, batch: &[LabeledPoint], epoch: usize| -> Result<()> {
        let loss = model.loss_grad_into(w, batch, &mut grad);
        let mut objective = loss;
        if cfg.prox_mu > 0.0 {
            objective += 0.5 * cfg.prox_mu * w.distance(anchor).powi(2);
        }
        if cfg.l2_prior > 0.0 {
            objective += 0.5 * cfg.l2_prior * w.dot(w);
        }
        if !objective.is_finite() {
            return Err(SimError::Divergence {
                epoch,
                context: format!(" on client {}", data.client_id),
            });
        }
        for ((wi, gi), ai) in w.iter_mut().zip(&grad).zip(anchor) {
            let g = gi + cfg.prox_mu * (*wi - ai) + cfg.l2_prior * *wi;
            *wi -= cfg.step * g;
        }
        Ok(())
    };

    match cfg.batch_size {
        None => {
            for epoch in 0..cfg.epochs {
                step(&mut w, &data.points, epoch)?;
            }
        }
        Some(bs) => {
            let mut rng = rng_from_seed(batch_seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut batch = Vec::with_capacity(bs);
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    batch.clear();
                    batch.extend(chunk.iter().map(|&i| data.points[i].clone()));
                    step(&mut w, &batch, epoch)?;
                }
            }
        }
    }
    if !w.is_finite() {
        return Err(SimError::Divergence {
            epoch: cfg.epochs,
            context: format!(" on client {}", data.client_id),
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FederatedDataset, Task};
    use crate::models::RbfFeatureModel;
    use nalgebra::{DMatrix, DVector};

    fn client(points: Vec<LabeledPoint>) -> ClientDataset {
        FederatedDataset::from_parts(vec![points], Task::Regression, 0)
            .unwrap()
            .clients
            .remove(0)
    }

    fn rbf() -> (RbfFeatureModel, Model) {
        let m = RbfFeatureModel::sample(100, 0.08, 3).unwrap();
        (m.clone(), Model::Rbf(m))
    }

    fn four_points() -> ClientDataset {
        client(
            [(-0.7, 0.2), (-0.1, -0.5), (0.35, 0.9), (0.8, -0.3)]
                .iter()
                .map(|&(x, y)| LabeledPoint::new(vec![x], y))
                .collect(),
        )
    }

    #[test]
    fn zero_step_returns_start() {
        let (_, model) = rbf();
        let w0 = WeightVector::from((0..100).map(|i| i as f64 * 0.01).collect::<Vec<_>>());
        let out = local_training(&model, &w0, &four_points(), &LocalTraining::full_batch(1, 0.0), None, 0).unwrap();
        assert_eq!(out, w0);
    }

    #[test]
    fn proximal_term_pins_to_anchor() {
        let (_, model) = rbf();
        let w0 = WeightVector::zeros(100);
        let mut last = f64::INFINITY;
        for mu in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let cfg = LocalTraining {
                prox_mu: mu,
                ..LocalTraining::full_batch(50, 0.005)
            };
            let out = local_training(&model, &w0, &four_points(), &cfg, Some(&w0), 0).unwrap();
            let dist = out.distance(&w0);
            assert!(dist < last, "mu {mu}: {dist} !< {last}");
            last = dist;
        }
    }

    #[test]
    fn long_training_reaches_least_squares_minimum() {
        // Normal-equations oracle: 4 points, 100 features, the minimum loss is 0
        // (interpolation); check it via the min-norm solution of F w = y.
        let (m, model) = rbf();
        let data = four_points();
        let f = DMatrix::from_fn(4, 100, |i, k| m.features(data.points[i].x[0])[k]);
        let y = DVector::from_iterator(4, data.points.iter().map(|p| p.y));
        let gram = &f * f.transpose();
        let w_star = f.transpose() * gram.cholesky().unwrap().solve(&y);
        let min_loss = model.loss(w_star.as_slice(), &data.points);

        let out = local_training(&model, &WeightVector::zeros(100), &data, &LocalTraining::full_batch(5000, 0.2), None, 0).unwrap();
        let loss = model.loss(&out, &data.points);
        assert!(min_loss < 1e-20);
        assert!((loss - min_loss).abs() < 1e-6, "loss {loss} vs {min_loss}");
    }

    #[test]
    fn gd_loss_is_monotone_below_stability_threshold() {
        let (m, model) = rbf();
        let data = four_points();
        let f = DMatrix::from_fn(4, 100, |i, k| m.features(data.points[i].x[0])[k]);
        // Hessian of (1/2n)|Fw - y|^2 is F^T F / n; its top eigenvalue equals that of F F^T / n.
        let lam_max = (&f * f.transpose() / 4.0).symmetric_eigenvalues().max();
        let eta = 1.9 / lam_max;
        let mut w = WeightVector::zeros(100);
        let mut last = model.loss(&w, &data.points);
        for _ in 0..200 {
            w = local_training(&model, &w, &data, &LocalTraining::full_batch(1, eta), None, 0).unwrap();
            let l = model.loss(&w, &data.points);
            assert!(l <= last + 1e-15);
            last = l;
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (_, model) = rbf();
        let cfg = LocalTraining::full_batch(400, 50.0);
        let err = local_training(&model, &WeightVector::zeros(100), &four_points(), &cfg, None, 0).unwrap_err();
        match err {
            SimError::Divergence { epoch, .. } => assert!(epoch > 0 && epoch <= 400),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn deterministic_minibatches() {
        let (_, model) = rbf();
        let cfg = LocalTraining {
            batch_size: Some(2),
            ..LocalTraining::full_batch(3, 0.1)
        };
        let a = local_training(&model, &WeightVector::zeros(100), &four_points(), &cfg, None, 5).unwrap();
        let b = local_training(&model, &WeightVector::zeros(100), &four_points(), &cfg, None, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn l2_prior_shrinks_weights() {
        let (_, model) = rbf();
        let plain = local_training(&model, &WeightVector::zeros(100), &four_points(), &LocalTraining::full_batch(300, 0.1), None, 0).unwrap();
        let cfg = LocalTraining {
            l2_prior: 0.5,
            ..LocalTraining::full_batch(300, 0.1)
        };
        let reg = local_training(&model, &WeightVector::zeros(100), &four_points(), &cfg, None, 0).unwrap();
        assert!(reg.norm() < plain.norm());
    }
}
