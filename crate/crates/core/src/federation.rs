//! Server-side orchestration of ensemble training.
//!
//! Clients are split once into `Q` strata. Training proceeds in ages of `K`
//! communication rounds; at the start of each age every stratum draws a
//! random order of the `K` modes, so that within an age every mode is
//! trained on every stratum exactly once. After each round the server
//! averages, per mode, the weights returned by the clients that trained it.
//! FedAvg and FedProx are the `K = 1` special cases.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::error::{Result, SimError};
use crate::exec::{self, ExecMode};
use crate::models::{local_training, InitSpec, LocalTraining, Model, WeightVector};
use crate::rng::{derive_seed, labels, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    FedEnsemble,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::FedEnsemble => "fed_ensemble",
            Algo::FedAvg => "fedavg",
            Algo::FedProx => "fedprox",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fed_ensemble" | "fed-ensemble" => Ok(Algo::FedEnsemble),
            "fedavg" => Ok(Algo::FedAvg),
            "fedprox" => Ok(Algo::FedProx),
            other => Err(SimError::config(
                "algo",
                format!("unknown algorithm `{other}` (expected fed_ensemble, fedavg or fedprox)"),
            )),
        }
    }
}

/// How the server weighs client updates of the same mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Proportional to the client's sample count.
    #[default]
    BySize,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub factor: f64,
    /// Number of communication rounds between decays.
    pub interval: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.99,
            interval: 10,
        }
    }
}

impl LrDecay {
    pub const NONE: LrDecay = LrDecay {
        factor: 1.0,
        interval: 1,
    };

    pub fn step_at(&self, base: f64, global_round: usize) -> f64 {
        base * self.factor.powi((global_round / self.interval) as i32)
    }
}

/// Everything the orchestrator needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub algo: Algo,
    /// Number of modes; forced to one for FedAvg and FedProx.
    pub k: usize,
    /// Number of ages `T`; the run has `T * K` communication rounds.
    pub ages: usize,
    /// Number of strata; defaults to `K` (capped at the client count).
    pub q: Option<usize>,
    /// Clients per round `M`, spread evenly over the strata.
    pub clients_per_round: usize,
    pub tau: usize,
    pub eta: f64,
    pub lr_decay: LrDecay,
    /// Only used by FedProx.
    pub prox_mu: f64,
    pub l2_prior: f64,
    pub batch_size: Option<usize>,
    pub init: InitSpec,
    pub weighting: Weighting,
    pub seed: u64,
    /// Evaluate every mode on the union dataset after each round.
    pub track_global_loss: bool,
    /// Record per-round wall-clock time. Off keeps metric files byte-reproducible.
    pub timing: bool,
    pub exec: ExecMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            algo: Algo::FedEnsemble,
            k: 5,
            ages: 20,
            q: None,
            clients_per_round: 50,
            tau: 5,
            eta: 0.1,
            lr_decay: LrDecay::default(),
            prox_mu: 0.01,
            l2_prior: 0.0,
            batch_size: None,
            init: InitSpec::default(),
            weighting: Weighting::BySize,
            seed: 0,
            track_global_loss: true,
            timing: false,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainingConfig {
    pub fn effective_k(&self) -> usize {
        match self.algo {
            Algo::FedEnsemble => self.k,
            Algo::FedAvg | Algo::FedProx => 1,
        }
    }

    pub fn effective_q(&self, n_clients: usize) -> usize {
        self.q.unwrap_or_else(|| self.effective_k().min(n_clients))
    }

    pub fn effective_prox_mu(&self) -> f64 {
        match self.algo {
            Algo::FedProx => self.prox_mu,
            Algo::FedEnsemble | Algo::FedAvg => 0.0,
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.k == 0 {
            return Err(SimError::config("k", "K must be ≥ 1"));
        }
        let q = self.effective_q(n_clients);
        if q == 0 || q > n_clients {
            return Err(SimError::config("q", format!("must lie in [1, {n_clients}]")));
        }
        if self.clients_per_round < q {
            return Err(SimError::config(
                "m",
                format!("{} clients per round cannot cover {q} strata", self.clients_per_round),
            ));
        }
        if !(self.lr_decay.factor > 0.0) || self.lr_decay.interval == 0 {
            return Err(SimError::config("lr_decay", "factor must be > 0 and interval >= 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(SimError::config("eta", "must be positive"));
        }
        self.local(self.eta).validate()?;
        self.init.validate()
    }

    fn local(&self, step: f64) -> LocalTraining {
        LocalTraining {
            epochs: self.tau,
            step,
            prox_mu: self.effective_prox_mu(),
            l2_prior: self.l2_prior,
            batch_size: self.batch_size,
        }
    }
}

/// Fixed random grouping of clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    assignment: Vec<usize>,
    n_strata: usize,
}

impl Strata {
    pub fn stratum_of(&self, client: usize) -> usize {
        self.assignment[client]
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Client ids of stratum `q`, ascending.
    pub fn members(&self, q: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&c| self.assignment[c] == q)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_strata];
        for &q in &self.assignment {
            s[q] += 1;
        }
        s
    }
}

/// Balanced random split of `n_clients` into `q` strata; lower-indexed
/// strata receive the remainder.
pub fn build_strata(n_clients: usize, q: usize, seed: u64) -> Result<Strata> {
    if q == 0 || q > n_clients {
        return Err(SimError::config("q", format!("must lie in [1, {n_clients}]")));
    }
    let mut order: Vec<usize> = (0..n_clients).collect();
    order.shuffle(&mut crate::rng::rng_from_seed(seed));
    let mut assignment = vec![0; n_clients];
    for (pos, &client) in order.iter().enumerate() {
        assignment[client] = pos % q;
    }
    Ok(Strata {
        assignment,
        n_strata: q,
    })
}

/// The `Q x K` matrix whose row `q` is the order in which stratum `q` trains the modes during one age.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSchedule {
    rows: Vec<Vec<usize>>,
}

impl PermutationSchedule {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        for row in &rows {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            if sorted != (0..k).collect::<Vec<_>>() {
                return Err(SimError::Contract(format!("schedule row {row:?} is not a permutation")));
            }
        }
        Ok(Self { rows })
    }

    pub fn mode(&self, stratum: usize, round: usize) -> usize {
        self.rows[stratum][round]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn n_modes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn new_schedule(q: usize, k: usize, seed: u64) -> Result<PermutationSchedule> {
    if q == 0 {
        return Err(SimError::config("q", "must be >= 1"));
    }
    if k == 0 {
        return Err(SimError::config("k", "K must be ≥ 1"));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let rows = (0..q)
        .map(|_| {
            let mut row: Vec<usize> = (0..k).collect();
            row.shuffle(&mut rng);
            row
        })
        .collect();
    Ok(PermutationSchedule { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub modes: Vec<WeightVector>,
}

impl Ensemble {
    pub fn new(modes: Vec<WeightVector>) -> Result<Self> {
        let Some(first) = modes.first() else {
            return Err(SimError::config("k", "an ensemble needs at least one mode"));
        };
        if modes.iter().any(|m| m.len() != first.len()) {
            return Err(SimError::Contract("ensemble modes differ in length".into()));
        }
        Ok(Self { modes })
    }

    pub fn k(&self) -> usize {
        self.modes.len()
    }
}

/// Which mode each stratum trains in one round, and on which clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumDispatch {
    pub stratum: usize,
    pub mode: usize,
    /// Selected clients, ascending.
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub age: usize,
    pub round: usize,
    pub dispatch: Vec<StratumDispatch>,
}

impl RoundPlan {
    pub fn n_clients(&self) -> usize {
        self.dispatch.iter().map(|d| d.clients.len()).sum()
    }

    /// Renames mode `k` to `perm[k]`.
    pub fn relabel(&self, perm: &[usize]) -> RoundPlan {
        let mut out = self.clone();
        out.dispatch.iter_mut().for_each(|d| d.mode = perm[d.mode]);
        out
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub mode: usize,
    pub n_samples: usize,
    pub weights: WeightVector,
}

/// Per-mode averaging of client weights. Updates are reduced in ascending
/// client-id order so the result does not depend on arrival order. Returns
/// the indices of the modes that changed.
pub fn server_update(ensemble: &mut Ensemble, received: &[ClientUpdate], weighting: Weighting) -> Result<Vec<usize>> {
    if received.is_empty() {
        return Err(SimError::Round("no client updates received".into()));
    }
    let k = ensemble.k();
    let dim = ensemble.modes[0].len();
    for u in received {
        if u.mode >= k {
            return Err(SimError::Protocol(format!(
                "client {} returned mode {} but the ensemble has {k}",
                u.client_id, u.mode
            )));
        }
        if u.weights.len() != dim {
            return Err(SimError::Protocol(format!(
                "client {} returned {} weights, expected {dim}",
                u.client_id,
                u.weights.len()
            )));
        }
    }
    let mut order: Vec<&ClientUpdate> = received.iter().collect();
    order.sort_by_key(|u| (u.mode, u.client_id));

    let mut updated = Vec::new();
    for group in order.chunk_by(|a, b| a.mode == b.mode) {
        let mode = group[0].mode;
        let coef = |u: &ClientUpdate| match weighting {
            Weighting::BySize => u.n_samples as f64,
            Weighting::Uniform => 1.0,
        };
        let total: f64 = group.iter().map(|u| coef(u)).sum();
        if !(total > 0.0) {
            return Err(SimError::Round(format!("mode {mode} received only empty clients")));
        }
        let mut acc = WeightVector::zeros(dim);
        for u in group {
            acc.axpy(coef(u), &u.weights);
        }
        acc.iter_mut().for_each(|v| *v /= total);
        ensemble.modes[mode] = acc;
        updated.push(mode);
    }
    Ok(updated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub stratum: usize,
    pub mode: usize,
    pub local_loss_before: f64,
    pub local_loss_after: f64,
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub age: usize,
    pub round: usize,
    pub step: f64,
    pub clients: Vec<ClientRecord>,
    /// Training loss of every mode on the union dataset after aggregation;
    /// empty when tracking is disabled.
    pub mode_train_loss: Vec<f64>,
    pub wallclock_ms: u64,
}

/// Orchestrator state for one training run.
pub struct Federation<'a> {
    model: &'a Model,
    data: &'a FederatedDataset,
    cfg: TrainingConfig,
    k: usize,
    strata: Strata,
    ensemble: Ensemble,
}

impl<'a> Federation<'a> {
    /// Builds strata and draws each mode's initial weights from its own stream.
    pub fn new(model: &'a Model, data: &'a FederatedDataset, cfg: TrainingConfig) -> Result<Self> {
        let k = cfg.effective_k();
        let modes = (0..k)
            .map(|m| model.init_weights(&cfg.init, &mut stream(cfg.seed, &labels::init(m))))
            .collect();
        Self::with_ensemble(model, data, cfg, Ensemble::new(modes)?)
    }

    pub fn with_ensemble(model: &'a Model, data: &'a FederatedDataset, cfg: TrainingConfig, ensemble: Ensemble) -> Result<Self> {
        cfg.validate(data.n_clients())?;
        let k = cfg.effective_k();
        if ensemble.k() != k {
            return Err(SimError::config("k", format!("ensemble has {} modes, config wants {k}", ensemble.k())));
        }
        model.check_weights(&ensemble.modes[0])?;
        if data.task != model.task() {
            return Err(SimError::config("model", "model task does not match the dataset"));
        }
        let q = cfg.effective_q(data.n_clients());
        let strata = build_strata(data.n_clients(), q, derive_seed(cfg.seed, labels::STRATA))?;
        Ok(Self {
            model,
            data,
            cfg,
            k,
            strata,
            ensemble,
        })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn into_ensemble(self) -> Ensemble {
        self.ensemble
    }

    pub fn strata(&self) -> &Strata {
        &self.strata
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn schedule_for_age(&self, age: usize) -> PermutationSchedule {
        new_schedule(
            self.strata.n_strata(),
            self.k,
            derive_seed(self.cfg.seed, &labels::schedule(age)),
        )
        .expect("validated dimensions")
    }

    /// Number of clients stratum `q` contributes per round: `M / Q`, with the
    /// remainder going to the lower-indexed strata, capped at the stratum size.
    pub fn clients_per_stratum(&self, q: usize) -> usize {
        let n_q = self.strata.n_strata();
        let m = self.cfg.clients_per_round;
        let quota = m / n_q + usize::from(q < m % n_q);
        quota.min(self.strata.sizes()[q])
    }

    pub fn plan_round(&self, age: usize, round: usize, schedule: &PermutationSchedule) -> RoundPlan {
        let mut rng = stream(self.cfg.seed, &labels::selection(age, round));
        let dispatch = (0..self.strata.n_strata())
            .map(|q| {
                let members = self.strata.members(q);
                let take = self.clients_per_stratum(q);
                let mut clients: Vec<usize> = index::sample(&mut rng, members.len(), take)
                    .into_iter()
                    .map(|i| members[i])
                    .collect();
                clients.sort_unstable();
                StratumDispatch {
                    stratum: q,
                    mode: schedule.mode(q, round),
                    clients,
                }
            })
            .collect();
        RoundPlan { age, round, dispatch }
    }

    /// Executes one planned round: local training on every selected client,
    /// then per-mode aggregation.
    pub fn run_round(&mut self, plan: &RoundPlan) -> Result<RunRecord> {
        let started = Instant::now();
        let global_round = plan.age * self.k + plan.round;
        let step = self.cfg.lr_decay.step_at(self.cfg.eta, global_round);
        let local = self.cfg.local(step);

        let jobs: Vec<(usize, usize, usize)> = plan
            .dispatch
            .iter()
            .flat_map(|d| d.clients.iter().map(move |&c| (d.stratum, d.mode, c)))
            .collect();
        if jobs.is_empty() {
            return Err(SimError::Round(format!("age {} round {} selected no clients", plan.age, plan.round)));
        }
        if let Some(&(_, mode, _)) = jobs.iter().find(|j| j.1 >= self.k) {
            return Err(SimError::Protocol(format!("plan dispatches mode {mode} of {}", self.k)));
        }

        let model = self.model;
        let data = self.data;
        let ensemble = &self.ensemble;
        let seed = self.cfg.seed;
        let outcomes = exec::try_map_indexed(self.cfg.exec, jobs.len(), |j| {
            let (stratum, mode, client) = jobs[j];
            let w0 = &ensemble.modes[mode];
            let cd = &data.clients[client];
            let batch_seed = derive_seed(seed, &labels::batches(plan.age, plan.round, client));
            let w = local_training(model, w0, cd, &local, Some(w0), batch_seed).map_err(|e| {
                e.with_context(&format!("age {}, round {}, client {client}", plan.age, plan.round))
            })?;
            let record = ClientRecord {
                client_id: client,
                stratum,
                mode,
                local_loss_before: model.loss(w0, &cd.points),
                local_loss_after: model.loss(&w, &cd.points),
            };
            Ok::<_, SimError>((
                record,
                ClientUpdate {
                    client_id: client,
                    mode,
                    n_samples: cd.len(),
                    weights: w,
                },
            ))
        })?;
        let (clients, updates): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
        server_update(&mut self.ensemble, &updates, self.cfg.weighting)?;

        let mode_train_loss = if self.cfg.track_global_loss {
            self.global_losses()
        } else {
            Vec::new()
        };
        Ok(RunRecord {
            age: plan.age,
            round: plan.round,
            step,
            clients,
            mode_train_loss,
            wallclock_ms: if self.cfg.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Loss of every mode on the union of all client data.
    pub fn global_losses(&self) -> Vec<f64> {
        let all: Vec<_> = self.data.points().cloned().collect();
        exec::map_slice(self.cfg.exec, &self.ensemble.modes, |w| self.model.loss(w, &all))
    }

    /// Runs one age: a fresh schedule and `K` rounds.
    pub fn run_age(&mut self, age: usize) -> Result<Vec<RunRecord>> {
        let schedule = self.schedule_for_age(age);
        (0..self.k)
            .map(|r| {
                let plan = self.plan_round(age, r, &schedule);
                self.run_round(&plan)
            })
            .collect()
    }

    pub fn run(&mut self) -> Result<Vec<RunRecord>> {
        let mut records = Vec::with_capacity(self.cfg.ages * self.k);
        for age in 0..self.cfg.ages {
            records.extend(self.run_age(age)?);
        }
        Ok(records)
    }
}

/// Trains an ensemble for `ages * K` communication rounds.
pub fn run_training(model: &Model, data: &FederatedDataset, cfg: &TrainingConfig) -> Result<(Ensemble, Vec<RunRecord>)> {
    let mut fed = Federation::new(model, data, cfg.clone())?;
    let records = fed.run()?;
    Ok((fed.into_ensemble(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToySine;
    use crate::models::RbfFeatureModel;
    use proptest::prelude::*;

    fn toy() -> (Model, FederatedDataset) {
        (
            Model::Rbf(RbfFeatureModel::sample(100, 0.08, 1).unwrap()),
            ToySine::default().generate(2).unwrap(),
        )
    }

    #[test]
    fn strata_sizes() {
        assert_eq!(build_strata(50, 5, 1).unwrap().sizes(), vec![10; 5]);
        assert_eq!(build_strata(7, 3, 1).unwrap().sizes(), vec![3, 2, 2]);
        let s = build_strata(6, 6, 4).unwrap();
        assert_eq!(s.sizes(), vec![1; 6]);
        let mut seen: Vec<usize> = s.assignment().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert!(build_strata(3, 4, 0).is_err());
        assert!(build_strata(3, 0, 0).is_err());
        assert_eq!(build_strata(20, 3, 9).unwrap(), build_strata(20, 3, 9).unwrap());
    }

    #[test]
    fn single_mode_schedule_is_all_zero() {
        let s = new_schedule(4, 1, 3).unwrap();
        assert!(s.rows().iter().all(|r| r == &vec![0]));
    }

    proptest! {
        #[test]
        fn schedule_rows_are_permutations(q in 1usize..12, k in 1usize..12, seed in any::<u64>()) {
            let s = new_schedule(q, k, seed).unwrap();
            for row in s.rows() {
                let mut r = row.clone();
                r.sort_unstable();
                prop_assert_eq!(r, (0..k).collect::<Vec<_>>());
            }
        }
    }

    fn update(client_id: usize, mode: usize, n: usize, w: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client_id,
            mode,
            n_samples: n,
            weights: WeightVector::from(w.to_vec()),
        }
    }

    #[test]
    fn server_update_single_client_is_verbatim() {
        let mut e = Ensemble::new(vec![WeightVector::zeros(2), WeightVector::zeros(2)]).unwrap();
        let changed = server_update(&mut e, &[update(4, 1, 3, &[1.5, -2.0])], Weighting::BySize).unwrap();
        assert_eq!(changed, vec![1]);
        assert_eq!(&*e.modes[1], &[1.5, -2.0]);
        assert_eq!(&*e.modes[0], &[0.0, 0.0]);
    }

    #[test]
    fn server_update_weighted_mean() {
        let mut e = Ensemble::new(vec![WeightVector::zeros(3)]).unwrap();
        let (u, v, z) = ([1.0, 2.0, 3.0], [3.0, 0.0, -1.0], [0.5, 4.0, 2.0]);
        server_update(&mut e, &[update(0, 0, 1, &u), update(1, 0, 1, &v)], Weighting::BySize).unwrap();
        assert_eq!(&*e.modes[0], &[2.0, 1.0, 1.0]);

        server_update(
            &mut e,
            &[update(2, 0, 2, &z), update(0, 0, 1, &u), update(1, 0, 1, &v)],
            Weighting::BySize,
        )
        .unwrap();
        for j in 0..3 {
            let expected = (u[j] + v[j] + 2.0 * z[j]) / 4.0;
            assert!((e.modes[0][j] - expected).abs() < 1e-15);
        }
        server_update(&mut e, &[update(2, 0, 2, &z), update(0, 0, 1, &u)], Weighting::Uniform).unwrap();
        assert_eq!(e.modes[0][0], 0.75);
    }

    #[test]
    fn server_update_errors() {
        let mut e = Ensemble::new(vec![WeightVector::zeros(1)]).unwrap();
        assert!(matches!(server_update(&mut e, &[], Weighting::BySize), Err(SimError::Round(_))));
        assert!(matches!(
            server_update(&mut e, &[update(0, 1, 1, &[0.0])], Weighting::BySize),
            Err(SimError::Protocol(_))
        ));
    }

    #[test]
    fn aggregation_only_reads_its_own_mode() {
        let base = Ensemble::new(vec![WeightVector::zeros(2), WeightVector::zeros(2)]).unwrap();
        let mut a = base.clone();
        let mut b = base;
        server_update(&mut a, &[update(0, 0, 1, &[1.0, 1.0]), update(1, 1, 1, &[5.0, 5.0])], Weighting::BySize).unwrap();
        server_update(&mut b, &[update(0, 0, 1, &[1.0, 1.0]), update(1, 1, 1, &[-9.0, 7.0])], Weighting::BySize).unwrap();
        assert_eq!(a.modes[0], b.modes[0]);
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let ups = vec![
            update(3, 0, 2, &[0.1, 0.7]),
            update(1, 0, 5, &[0.3, -0.2]),
            update(2, 0, 1, &[1e-9, 3.3]),
        ];
        let mut rev = ups.clone();
        rev.reverse();
        let mut a = Ensemble::new(vec![WeightVector::zeros(2)]).unwrap();
        let mut b = a.clone();
        server_update(&mut a, &ups, Weighting::BySize).unwrap();
        server_update(&mut b, &rev, Weighting::BySize).unwrap();
        assert_eq!(a.modes[0].to_bytes(), b.modes[0].to_bytes());
    }

    #[test]
    fn round_plan_respects_quota() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 5,
            clients_per_round: 20,
            ..TrainingConfig::default()
        };
        let fed = Federation::new(&model, &data, cfg).unwrap();
        let plan = fed.plan_round(0, 0, &fed.schedule_for_age(0));
        assert_eq!(plan.n_clients(), 20);
        for d in &plan.dispatch {
            assert_eq!(d.clients.len(), 4);
            assert!(d.clients.iter().all(|&c| fed.strata().stratum_of(c) == d.stratum));
        }
    }

    #[test]
    fn uneven_strata_still_reach_full_participation() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 40,
            clients_per_round: 50,
            ..TrainingConfig::default()
        };
        let fed = Federation::new(&model, &data, cfg).unwrap();
        let plan = fed.plan_round(0, 0, &fed.schedule_for_age(0));
        assert_eq!(plan.n_clients(), 50);
    }

    #[test]
    fn zero_ages_is_a_no_op() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            ages: 0,
            ..TrainingConfig::default()
        };
        let fed = Federation::new(&model, &data, cfg.clone()).unwrap();
        let init = fed.ensemble().clone();
        let (ens, records) = run_training(&model, &data, &cfg).unwrap();
        assert!(records.is_empty());
        assert_eq!(ens, init);
    }

    #[test]
    fn record_count_is_ages_times_k() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 3,
            ages: 2,
            ..TrainingConfig::default()
        };
        let (_, records) = run_training(&model, &data, &cfg).unwrap();
        assert_eq!(records.len(), 6);
    }

    #[test]
    fn fedavg_forces_single_mode() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            algo: Algo::FedAvg,
            k: 7,
            ages: 1,
            ..TrainingConfig::default()
        };
        let (ens, records) = run_training(&model, &data, &cfg).unwrap();
        assert_eq!(ens.k(), 1);
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn identical_clients_keep_modes_equal() {
        let model = Model::Rbf(RbfFeatureModel::sample(20, 0.1, 1).unwrap());
        let one = ToySine::default().generate_at(&[vec![-0.2, 0.4]], 3).unwrap();
        let parts = vec![one.clients[0].points.clone(); 6];
        let data = FederatedDataset::from_parts(parts, crate::data::Task::Regression, 0).unwrap();
        let cfg = TrainingConfig {
            k: 3,
            ages: 2,
            q: Some(1),
            clients_per_round: 6,
            ..TrainingConfig::default()
        };
        let w0 = WeightVector::from(vec![0.3; 20]);
        let ens = Ensemble::new(vec![w0.clone(), w0.clone(), w0]).unwrap();
        let mut fed = Federation::with_ensemble(&model, &data, cfg, ens).unwrap();
        fed.run().unwrap();
        let modes = &fed.ensemble().modes;
        assert_eq!(modes[0], modes[1]);
        assert_eq!(modes[1], modes[2]);
    }

    #[test]
    fn parallel_and_sequential_runs_agree_bitwise() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 4,
            ages: 2,
            ..TrainingConfig::default()
        };
        let (a, ra) = run_training(&model, &data, &TrainingConfig { exec: ExecMode::Sequential, ..cfg.clone() }).unwrap();
        let (b, rb) = run_training(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn relabeling_modes_permutes_the_result() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 3,
            ages: 2,
            ..TrainingConfig::default()
        };
        let fed = Federation::new(&model, &data, cfg.clone()).unwrap();
        let init = fed.ensemble().clone();
        let perm = [2, 0, 1];
        let mut permuted = init.clone();
        for (k, &p) in perm.iter().enumerate() {
            permuted.modes[p] = init.modes[k].clone();
        }
        let mut a = Federation::with_ensemble(&model, &data, cfg.clone(), init).unwrap();
        let mut b = Federation::with_ensemble(&model, &data, cfg, permuted).unwrap();
        for age in 0..2 {
            let schedule = a.schedule_for_age(age);
            for r in 0..3 {
                let plan = a.plan_round(age, r, &schedule);
                a.run_round(&plan).unwrap();
                b.run_round(&plan.relabel(&perm)).unwrap();
            }
        }
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(a.ensemble().modes[k], b.ensemble().modes[p]);
        }
    }

    #[test]
    fn divergence_carries_round_context() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            k: 1,
            ages: 3,
            eta: 40.0,
            tau: 50,
            ..TrainingConfig::default()
        };
        match run_training(&model, &data, &cfg) {
            Err(SimError::Divergence { context, .. }) => assert!(context.contains("round"), "{context}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn lr_decay_schedule() {
        let d = LrDecay::default();
        assert_eq!(d.step_at(1.0, 9), 1.0);
        assert_eq!(d.step_at(1.0, 10), 0.99);
        assert!((d.step_at(1.0, 25) - 0.99f64.powi(2)).abs() < 1e-15);
    }
}
