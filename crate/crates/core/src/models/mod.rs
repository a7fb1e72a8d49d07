//! Locally trained predictors: the RBF-feature linear model and a small MLP.

mod mlp;
mod rbf;
mod training;
mod weights;

pub use mlp::{Activation, MlpModel};
pub use rbf::RbfFeatureModel;
pub use training::{local_training, LocalTraining};
pub use weights::WeightVector;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledPoint, Task};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every parameter i.i.d. `N(0, sigma^2)`.
    NormalScaled,
    He,
    Xavier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub sigma: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            scheme: InitScheme::NormalScaled,
            sigma: 1.0,
        }
    }
}

impl InitSpec {
    pub fn normal(sigma: f64) -> Self {
        Self {
            scheme: InitScheme::NormalScaled,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme == InitScheme::NormalScaled && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SimError::config("init.sigma", "must be positive"));
        }
        Ok(())
    }

    /// Standard deviation for a weight block with the given fan-in/fan-out.
    fn std_for(&self, fan_in: usize, fan_out: usize) -> f64 {
        match self.scheme {
            InitScheme::NormalScaled => self.sigma,
            InitScheme::He => (2.0 / fan_in as f64).sqrt(),
            InitScheme::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    fn fill(&self, out: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, self.std_for(fan_in, fan_out)).expect("finite std");
        out.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
}

/// A differentiable predictor. Weights live outside the model in a [`WeightVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Rbf(RbfFeatureModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn n_params(&self) -> usize {
        match self {
            Model::Rbf(m) => m.n_params(),
            Model::Mlp(m) => m.n_params(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Rbf(_) => Task::Regression,
            Model::Mlp(m) => m.task(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Rbf(_) => 1,
            Model::Mlp(m) => m.sizes()[0],
        }
    }

    /// Number of outputs: one for regression, the class count for classification.
    pub fn output_dim(&self) -> usize {
        match self {
            Model::Rbf(_) => 1,
            Model::Mlp(m) => *m.sizes().last().expect("validated sizes"),
        }
    }

    pub fn check_weights(&self, w: &WeightVector) -> Result<()> {
        if w.len() != self.n_params() {
            return Err(SimError::Contract(format!(
                "weight vector has {} entries, model expects {}",
                w.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(SimError::Contract(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw model output: the scalar prediction for regression, logits for classification.
    pub fn predict(&self, w: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        self.check_input(x)?;
        Ok(self.forward(w, x))
    }

    /// Unchecked forward pass.
    pub(crate) fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        match self {
            Model::Rbf(m) => vec![m.predict(w, x[0])],
            Model::Mlp(m) => m.forward(w, x),
        }
    }

    /// Predictive distribution: softmax of the logits for classification,
    /// the raw output for regression.
    pub fn predict_proba(&self, w: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict(w, x)?;
        Ok(match self.task() {
            Task::Classification => softmax(&out),
            Task::Regression => out,
        })
    }

    /// Data loss: `(1/2n) sum (f(x) - y)^2` for regression, mean cross-entropy for classification.
    pub fn loss(&self, w: &[f64], batch: &[LabeledPoint]) -> f64 {
        match self {
            Model::Rbf(m) => m.loss(w, batch),
            Model::Mlp(m) => m.loss(w, batch),
        }
    }

    /// Data loss and its exact gradient.
    pub fn loss_grad(&self, w: &WeightVector, batch: &[LabeledPoint]) -> Result<(f64, WeightVector)> {
        self.check_weights(w)?;
        if batch.is_empty() {
            return Err(SimError::Contract("loss over an empty batch".into()));
        }
        if let Some(p) = batch.iter().find(|p| p.x.len() != self.input_dim()) {
            return Err(SimError::Contract(format!(
                "input has dimension {}, model expects {}",
                p.x.len(),
                self.input_dim()
            )));
        }
        let mut grad = vec![0.0; self.n_params()];
        let loss = self.loss_grad_into(w, batch, &mut grad);
        Ok((loss, WeightVector::from(grad)))
    }

    /// Unchecked variant writing into `grad` (overwritten).
    pub(crate) fn loss_grad_into(&self, w: &[f64], batch: &[LabeledPoint], grad: &mut [f64]) -> f64 {
        match self {
            Model::Rbf(m) => m.loss_grad_into(w, batch, grad),
            Model::Mlp(m) => m.loss_grad_into(w, batch, grad),
        }
    }

    /// Draws initial weights.
    pub fn init_weights(&self, spec: &InitSpec, rng: &mut impl Rng) -> WeightVector {
        let mut w = vec![0.0; self.n_params()];
        match self {
            Model::Rbf(m) => spec.fill(&mut w, m.n_params(), 1, rng),
            Model::Mlp(m) => m.init_into(spec, &mut w, rng),
        }
        WeightVector::from(w)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1.0, 2.0, 3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 3);
    }

    #[test]
    fn init_schemes_have_expected_spread() {
        let model = Model::Rbf(RbfFeatureModel::new((0..400).map(|i| i as f64 / 400.0).collect(), 0.08).unwrap());
        let mut rng = rng_from_seed(1);
        let w = model.init_weights(&InitSpec::normal(0.5), &mut rng);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 0.25).abs() < 0.05, "var {var}");
        let he = InitSpec {
            scheme: InitScheme::He,
            sigma: 1.0,
        };
        let w = model.init_weights(&he, &mut rng);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 400.0).abs() < 2e-3, "var {var}");
    }

    #[test]
    fn dimension_mismatch_is_a_contract_violation() {
        let model = Model::Rbf(RbfFeatureModel::new(vec![0.0, 0.5], 0.1).unwrap());
        let w = WeightVector::zeros(3);
        assert!(matches!(model.predict(&w, &[0.0]), Err(SimError::Contract(_))));
        let w = WeightVector::zeros(2);
        assert!(matches!(model.predict(&w, &[0.0, 1.0]), Err(SimError::Contract(_))));
        assert!(matches!(model.loss_grad(&w, &[]), Err(SimError::Contract(_))));
    }
}
