//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic_classification, partition_by_label, partition_iid, FederatedDataset, LabeledPoint, ToySine,
};
use crate::error::{Result, SimError};
use crate::exec::ExecMode;
use crate::federation::{Algo, LrDecay, TrainingConfig, Weighting};
use crate::models::{Activation, InitSpec, MlpModel, Model, RbfFeatureModel};
use crate::rng::{derive_seed, labels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub n_clients: usize,
    /// Share of the pool held out as the test set.
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_per_class: 200,
            d_in: 16,
            spread: 0.3,
            n_clients: 20,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    ToySine(ToySine),
    SyntheticClassification(SyntheticSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::ToySine(ToySine::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    #[default]
    Iid,
    /// Each client holds at most `noc` classes.
    Noc { noc: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Centers drawn uniformly from `[-1, 1]`.
    Rbf { n_centers: usize, bandwidth: f64 },
    Mlp { hidden: Vec<usize>, activation: Activation },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Rbf {
            n_centers: RbfFeatureModel::DEFAULT_CENTERS,
            bandwidth: RbfFeatureModel::DEFAULT_BANDWIDTH,
        }
    }
}

/// A complete experiment description. Every field has a default, so an
/// empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algo: Algo,
    pub k: usize,
    pub ages: usize,
    pub q: Option<usize>,
    /// Clients per round.
    pub m: usize,
    pub tau: usize,
    pub eta: f64,
    pub prox_mu: f64,
    pub l2_prior: f64,
    pub batch_size: Option<usize>,
    pub weighting: Weighting,
    pub seed: u64,
    pub out: PathBuf,
    pub timing: bool,
    pub track_global_loss: bool,
    pub exec: ExecMode,
    pub lr_decay: LrDecay,
    pub init: InitSpec,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            algo: t.algo,
            k: t.k,
            ages: t.ages,
            q: t.q,
            m: t.clients_per_round,
            tau: t.tau,
            eta: t.eta,
            prox_mu: t.prox_mu,
            l2_prior: t.l2_prior,
            batch_size: t.batch_size,
            weighting: t.weighting,
            seed: t.seed,
            out: PathBuf::from("simfed-out"),
            timing: t.timing,
            track_global_loss: t.track_global_loss,
            exec: t.exec,
            lr_decay: t.lr_decay,
            init: t.init,
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            model: ModelSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub algo: Option<Algo>,
    pub k: Option<usize>,
    pub ages: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Everything needed to call [`crate::federation::run_training`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: Model,
    pub train: FederatedDataset,
    /// Held-out points for classification datasets.
    pub test: Option<Vec<LabeledPoint>>,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SimError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.algo {
            self.algo = a;
        }
        if let Some(k) = o.k {
            self.k = k;
        }
        if let Some(t) = o.ages {
            self.ages = t;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn n_clients(&self) -> usize {
        match &self.dataset {
            DatasetSpec::ToySine(t) => t.n_clients,
            DatasetSpec::SyntheticClassification(s) => s.n_clients,
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            algo: self.algo,
            k: self.k,
            ages: self.ages,
            q: self.q,
            clients_per_round: self.m,
            tau: self.tau,
            eta: self.eta,
            lr_decay: self.lr_decay,
            prox_mu: self.prox_mu,
            l2_prior: self.l2_prior,
            batch_size: self.batch_size,
            init: self.init,
            weighting: self.weighting,
            seed: self.seed,
            track_global_loss: self.track_global_loss,
            timing: self.timing,
            exec: self.exec,
        }
    }

    /// Range checks that do not need the generated data.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SimError::config("k", "K must be ≥ 1"));
        }
        if self.m == 0 {
            return Err(SimError::config("m", "M must be ≥ 1"));
        }
        if self.tau == 0 {
            return Err(SimError::config("tau", "must be ≥ 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(SimError::config("eta", "must be positive"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(SimError::config("prox_mu", "must be ≥ 0"));
        }
        if !(self.l2_prior >= 0.0) {
            return Err(SimError::config("l2_prior", "must be ≥ 0"));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return Err(SimError::config("lr_decay.factor", "must lie in (0, 1]"));
        }
        if self.lr_decay.interval == 0 {
            return Err(SimError::config("lr_decay.interval", "must be ≥ 1"));
        }
        self.init.validate()?;
        let n = self.n_clients();
        if n == 0 {
            return Err(SimError::config("dataset.n_clients", "must be ≥ 1"));
        }
        if self.m > n {
            return Err(SimError::config("m", format!("cannot select {} of {n} clients", self.m)));
        }
        if let Some(q) = self.q {
            if q == 0 || q > n {
                return Err(SimError::config("q", format!("must lie in [1, {n}]")));
            }
        }
        match (&self.dataset, &self.model) {
            (DatasetSpec::ToySine(_), ModelSpec::Mlp { .. }) | (DatasetSpec::SyntheticClassification(_), ModelSpec::Rbf { .. }) => {
                return Err(SimError::config("model", "model kind does not fit the dataset task"));
            }
            _ => {}
        }
        if let (DatasetSpec::ToySine(_), PartitionSpec::Noc { .. }) = (&self.dataset, &self.partition) {
            return Err(SimError::config("partition", "label partitioning needs a classification dataset"));
        }
        if let DatasetSpec::SyntheticClassification(s) = &self.dataset {
            if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
                return Err(SimError::config("dataset.test_fraction", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Generates data and model from the master seed.
    pub fn build(&self) -> Result<Experiment> {
        self.validate()?;
        let data_seed = derive_seed(self.seed, labels::DATA);
        let (train, test) = match &self.dataset {
            DatasetSpec::ToySine(t) => (t.generate(data_seed)?, None),
            DatasetSpec::SyntheticClassification(s) => {
                let pool = gen_synthetic_classification(s.n_classes, s.n_per_class, s.d_in, s.spread, data_seed)?;
                let (train, test) = pool.train_test_split(s.test_fraction, derive_seed(self.seed, labels::SPLIT))?;
                let part_seed = derive_seed(self.seed, labels::PARTITION);
                let fed = match self.partition {
                    PartitionSpec::Iid => partition_iid(&train, s.n_clients, part_seed)?,
                    PartitionSpec::Noc { noc } => partition_by_label(&train, s.n_clients, noc, part_seed)?,
                };
                (fed, Some(test.points))
            }
        };
        let model = match &self.model {
            ModelSpec::Rbf { n_centers, bandwidth } => Model::Rbf(RbfFeatureModel::sample(
                *n_centers,
                *bandwidth,
                derive_seed(self.seed, labels::CENTERS),
            )?),
            ModelSpec::Mlp { hidden, activation } => {
                let mut sizes = vec![train.input_dim()];
                sizes.extend(hidden);
                sizes.push(train.n_classes);
                Model::Mlp(MlpModel::new(sizes, *activation, train.task)?)
            }
        };
        let training = self.training();
        training.validate(train.n_clients())?;
        Ok(Experiment {
            model,
            train,
            test,
            training,
        })
    }
}

/// Reads the file (if any), applies overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SimError::io(p, e))?;
            RunConfig::from_toml_str(&text, p)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
