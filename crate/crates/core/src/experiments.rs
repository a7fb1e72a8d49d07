//! Experiment presets: each one generates its data, trains, writes CSV
//! outputs plus a manifest, and evaluates a list of pass/fail checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    bias_variance, ensemble_accuracy, ensemble_predict, loss_surface_projection, mode_stats, toy_grid,
    BiasVarianceReport, BiasVarianceRow, ModeStatsRow,
};
use crate::config::{RunConfig, SyntheticSpec};
use crate::data::{
    gen_synthetic_classification, partition_by_label, spread_inputs, FederatedDataset, LabeledPoint, ToySine,
};
use crate::error::{Result, SimError};
use crate::exec::{self, ExecMode};
use crate::federation::{run_training, Algo, Ensemble, Federation, LrDecay, TrainingConfig};
use crate::manifest::{stream_seed_table, ManifestWriter};
use crate::metrics::{write_csv, write_metrics};
use crate::models::{Activation, InitSpec, MlpModel, Model, RbfFeatureModel};
use crate::oracle::{fit_decay, gp_posterior, variance_ratio_check, DecayFit, GpPosterior, OracleRow, VarianceScaling};
use crate::rng::{derive_seed, labels};

/// Reference values for the toy bias-variance table at `K = 1`.
pub const REFERENCE_BIAS_K1: f64 = 0.109;
pub const REFERENCE_VARIANCE_K1: f64 = 0.0496;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table1Biasvar,
    Theorem2Oracle,
    NocSweep,
    DecayCheck,
    SurfaceFig,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Table1Biasvar,
        Preset::Theorem2Oracle,
        Preset::NocSweep,
        Preset::DecayCheck,
        Preset::SurfaceFig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1Biasvar => "table1_biasvar",
            Preset::Theorem2Oracle => "theorem2_oracle",
            Preset::NocSweep => "noc_sweep",
            Preset::DecayCheck => "decay_check",
            Preset::SurfaceFig => "surface_fig",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|p| p.name()).collect()
    }
}

impl std::str::FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            SimError::config("preset", format!("unknown preset `{s}`; available: {}", Self::names().join(", ")))
        })
    }
}

/// One pass/fail verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            value,
            detail: detail.into(),
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOutcome {
    pub preset: Preset,
    pub dir: PathBuf,
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub exec: ExecMode,
}

/// Runs a preset at its full default size and writes its outputs under `opts.out`.
pub fn run_preset(preset: Preset, opts: &PresetOptions) -> Result<PresetOutcome> {
    match preset {
        Preset::Table1Biasvar => {
            let p = Table1Params::default();
            let r = table1(&p, opts.seed, opts.exec)?;
            let rows: Vec<_> = r.reports.iter().map(|x| BiasVarianceRow::new("fed_ensemble", opts.seed, x)).collect();
            finish(preset, opts, &p, table1_checks(&r), |dir| {
                write_csv(&dir.join("bias_variance.csv"), &rows)?;
                Ok(vec!["bias_variance.csv".into()])
            })
        }
        Preset::Theorem2Oracle => {
            let p = Theorem2Params::default();
            let mean = theorem2_mean(&p, opts.seed, opts.exec)?;
            let cov = theorem2_cov(&p, opts.seed, opts.exec)?;
            let mut checks = theorem2_mean_checks(&mean);
            checks.extend(theorem2_cov_checks(&cov));
            finish(preset, opts, &p, checks, |dir| {
                write_csv(&dir.join("mean_agreement.csv"), &mean.runs)?;
                write_csv(&dir.join("oracle_report.csv"), &cov.rows)?;
                Ok(vec!["mean_agreement.csv".into(), "oracle_report.csv".into()])
            })
        }
        Preset::NocSweep => {
            let p = NocSweepParams::default();
            let r = noc_sweep(&p, opts.seed, opts.exec)?;
            finish(preset, opts, &p, noc_checks(&r), |dir| {
                write_csv(&dir.join("noc_runs.csv"), &r.runs)?;
                write_csv(&dir.join("noc_summary.csv"), &r.summary)?;
                write_csv(&dir.join("mode_stats.csv"), &r.mode_stats)?;
                Ok(vec!["noc_runs.csv".into(), "noc_summary.csv".into(), "mode_stats.csv".into()])
            })
        }
        Preset::DecayCheck => {
            let p = DecayParams::default();
            let r = decay_check(&p, opts.seed, opts.exec)?;
            finish(preset, opts, &p, decay_checks(&r), |dir| {
                write_metrics(&r.records, &dir.join("metrics.csv"))?;
                write_csv(&dir.join("decay_fit.csv"), &r.fits)?;
                Ok(vec!["metrics.csv".into(), "decay_fit.csv".into()])
            })
        }
        Preset::SurfaceFig => {
            let p = SurfaceParams::default();
            let (grid, checks) = surface_fig(&p, opts.seed, opts.exec)?;
            finish(preset, opts, &p, checks, |dir| {
                grid.write_csv(&dir.join("surface.csv"))?;
                Ok(vec!["surface.csv".into()])
            })
        }
    }
}

/// Per-mode outcome of a plain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Vec<ModeSummary>,
    pub ensemble_test_accuracy: Option<f64>,
    /// Every mode ended with a lower training loss than it started with.
    pub checks: Vec<Check>,
}

/// Trains the configured experiment and writes `metrics.csv`,
/// `summary.csv`, `config.toml` and the manifest into `cfg.out`.
pub fn run_config(cfg: &RunConfig) -> Result<RunOutcome> {
    let exp = cfg.build()?;
    let tc = &exp.training;
    let dir = cfg.out.clone();
    let config = serde_json::to_value(cfg).expect("config serializes");
    let manifest = ManifestWriter::begin(&dir, "run", config, cfg.seed, stream_seed_table(cfg.seed, tc.effective_k(), tc.ages))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml_string()).map_err(|e| SimError::io(&config_path, e))?;

    let mut fed = Federation::new(&exp.model, &exp.train, tc.clone())?;
    let initial = fed.global_losses();
    let records = fed.run()?;
    let final_losses = fed.global_losses();
    let ens = fed.into_ensemble();

    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| SimError::io(&metrics_path, e))?;
    }
    write_metrics(&records, &metrics_path)?;
    let summary = (0..ens.k())
        .map(|k| {
            let test_accuracy = match &exp.test {
                Some(test) => Some(ensemble_accuracy(&Ensemble::new(vec![ens.modes[k].clone()])?, &exp.model, test)?),
                None => None,
            };
            Ok(ModeSummary {
                mode: k,
                initial_train_loss: initial[k],
                final_train_loss: final_losses[k],
                test_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&dir.join("summary.csv"), &summary)?;
    let ensemble_test_accuracy = exp.test.as_deref().map(|t| ensemble_accuracy(&ens, &exp.model, t)).transpose()?;
    manifest.finish(&["config.toml", "metrics.csv", "summary.csv"])?;

    let checks = summary
        .iter()
        .map(|m| {
            Check::new(
                &format!("mode_{}_loss_decreased", m.mode),
                m.final_train_loss < m.initial_train_loss,
                m.final_train_loss,
                format!("{:.4e} -> {:.4e}", m.initial_train_loss, m.final_train_loss),
            )
        })
        .collect();
    Ok(RunOutcome {
        dir,
        summary,
        ensemble_test_accuracy,
        checks,
    })
}

fn finish<P: Serialize>(
    preset: Preset,
    opts: &PresetOptions,
    params: &P,
    checks: Vec<Check>,
    write: impl FnOnce(&Path) -> Result<Vec<String>>,
) -> Result<PresetOutcome> {
    let dir = opts.out.clone();
    let config = serde_json::to_value(params).expect("preset parameters serialize");
    let manifest = ManifestWriter::begin(&dir, preset.name(), config, opts.seed, stream_seed_table(opts.seed, 0, 0))?;
    let mut outputs = write(&dir)?;
    write_csv(&dir.join("checks.csv"), &checks)?;
    outputs.push("checks.csv".into());
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    manifest.finish(&names)?;
    Ok(PresetOutcome {
        preset,
        dir,
        checks,
        outputs,
    })
}

fn toy_rbf(n_centers: usize, bandwidth: f64, seed: u64) -> Result<(Model, RbfFeatureModel)> {
    let rbf = RbfFeatureModel::sample(n_centers, bandwidth, derive_seed(seed, labels::CENTERS))?;
    Ok((Model::Rbf(rbf.clone()), rbf))
}

// ---------------------------------------------------------------------------
// Bias-variance table

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Params {
    pub ks: Vec<usize>,
    /// Every K trains for the same number of rounds, `ages = total_rounds / K`.
    pub total_rounds: usize,
    pub n_repeats: usize,
    pub eta: f64,
    pub tau: usize,
    pub lr_decay: LrDecay,
    pub init_sigma: f64,
    pub clients_per_round: usize,
    pub toy: ToySine,
    pub n_centers: usize,
    pub bandwidth: f64,
    pub grid_n: usize,
}

impl Default for Table1Params {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 10, 20, 40],
            total_rounds: 120,
            n_repeats: 100,
            eta: 0.1,
            tau: 5,
            lr_decay: LrDecay::default(),
            init_sigma: 1.0,
            clients_per_round: 50,
            toy: ToySine::default(),
            n_centers: RbfFeatureModel::DEFAULT_CENTERS,
            bandwidth: RbfFeatureModel::DEFAULT_BANDWIDTH,
            grid_n: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Result {
    pub reports: Vec<BiasVarianceReport>,
    /// Log-variance slope over the K values in {1, 2, 10, 20} that were run.
    pub scaling: Option<VarianceScaling>,
}

impl Table1Result {
    pub fn report(&self, k: usize) -> Option<&BiasVarianceReport> {
        self.reports.iter().find(|r| r.k == k)
    }
}

/// Training data and centers are fixed by `seed`; repeats vary the
/// initialization, strata, schedule and client selection.
pub fn table1(p: &Table1Params, seed: u64, mode: ExecMode) -> Result<Table1Result> {
    let data = p.toy.generate(derive_seed(seed, labels::DATA))?;
    let (model, _) = toy_rbf(p.n_centers, p.bandwidth, seed)?;
    let grid = toy_grid(p.grid_n);
    let target: Vec<f64> = grid.iter().map(|&x| ToySine::target(x)).collect();

    let mut reports = Vec::with_capacity(p.ks.len());
    for &k in &p.ks {
        let cfg = TrainingConfig {
            algo: Algo::FedEnsemble,
            k,
            ages: (p.total_rounds / k).max(1),
            q: Some(k.min(data.n_clients())),
            clients_per_round: p.clients_per_round,
            tau: p.tau,
            eta: p.eta,
            lr_decay: p.lr_decay,
            init: InitSpec::normal(p.init_sigma),
            track_global_loss: false,
            exec: ExecMode::Sequential,
            ..TrainingConfig::default()
        };
        let runner = |repeat_seed: u64| {
            let (ens, _) = run_training(&model, &data, &TrainingConfig { seed: repeat_seed, ..cfg.clone() })?;
            grid.iter().map(|&x| Ok(ensemble_predict(&ens, &model, &[x])?[0])).collect()
        };
        reports.push(bias_variance(runner, &target, k, p.n_repeats, derive_seed(seed, &format!("table1_k{k}")), mode)?);
    }
    let per_k: BTreeMap<usize, f64> = reports
        .iter()
        .filter(|r| [1, 2, 10, 20].contains(&r.k))
        .map(|r| (r.k, r.variance))
        .collect();
    let scaling = (per_k.len() >= 3).then(|| variance_ratio_check(&per_k)).transpose()?;
    Ok(Table1Result { reports, scaling })
}

fn within_relative(value: f64, reference: f64, tol: f64) -> bool {
    (value - reference).abs() <= tol * reference
}

pub fn table1_checks(r: &Table1Result) -> Vec<Check> {
    let mut checks = Vec::new();
    match r.report(1) {
        Some(k1) => {
            checks.push(Check::new(
                "bias_level_k1",
                within_relative(k1.bias, REFERENCE_BIAS_K1, 0.5),
                k1.bias,
                format!("sqrt(bias_sq) = {:.4} vs {REFERENCE_BIAS_K1} +/- 50% (bias_sq = {:.4})", k1.bias, k1.bias_sq),
            ));
            checks.push(Check::new(
                "variance_k1",
                within_relative(k1.variance, REFERENCE_VARIANCE_K1, 0.5),
                k1.variance,
                format!("{:.4} vs {REFERENCE_VARIANCE_K1} +/- 50%", k1.variance),
            ));
        }
        None => checks.push(Check::new("bias_level_k1", false, f64::NAN, "K = 1 was not run")),
    }
    let biases: Vec<f64> = r.reports.iter().map(|x| x.bias).collect();
    let lo = biases.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = biases.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi / lo - 1.0;
    checks.push(Check::new("bias_flat_across_k", spread < 0.2, spread, format!("max/min - 1 = {spread:.3} (< 0.2)")));
    match (r.report(1), r.report(10)) {
        (Some(a), Some(b)) => {
            let ratio = a.variance / b.variance;
            checks.push(Check::new("variance_ratio_1_10", ratio >= 3.0, ratio, format!("{ratio:.2} (>= 3)")));
        }
        _ => checks.push(Check::new("variance_ratio_1_10", false, f64::NAN, "K = 1 or K = 10 missing")),
    }
    match &r.scaling {
        Some(s) => checks.push(Check::new(
            "variance_slope",
            (-1.2..=-0.5).contains(&s.slope),
            s.slope,
            format!("slope {:.3} in [-1.2, -0.5]", s.slope),
        )),
        None => checks.push(Check::new("variance_slope", false, f64::NAN, "fewer than three of K = 1, 2, 10, 20")),
    }
    checks
}

// ---------------------------------------------------------------------------
// Kernel-limit agreement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Params {
    pub n_clients: usize,
    pub pts_per_client: usize,
    /// Inputs are evenly spaced on `[-span, span]`.
    pub span: f64,
    pub toy: ToySine,
    pub n_centers: usize,
    pub bandwidth: f64,
    pub tau: usize,
    /// First step size tried by the stability search.
    pub eta_start: f64,
    pub k_mean: usize,
    pub n_mean_probes: usize,
    pub k_cov: usize,
    pub n_inits: usize,
    pub init_sigma: f64,
    pub cov_probes: Vec<f64>,
    /// Training stops once every mode's loss is below this value.
    pub converged_loss: f64,
    pub max_ages: usize,
}

impl Default for Theorem2Params {
    fn default() -> Self {
        Self {
            n_clients: 6,
            pts_per_client: 2,
            span: 0.9,
            toy: ToySine::default(),
            n_centers: RbfFeatureModel::DEFAULT_CENTERS,
            bandwidth: RbfFeatureModel::DEFAULT_BANDWIDTH,
            tau: 5,
            eta_start: 1.0,
            k_mean: 3,
            n_mean_probes: 21,
            k_cov: 2,
            n_inits: 200,
            init_sigma: 1.0,
            cov_probes: vec![-0.818, -0.491, -0.164, 0.164, 0.491],
            converged_loss: 1e-26,
            max_ages: 20_000,
        }
    }
}

impl Theorem2Params {
    pub fn dataset(&self, seed: u64) -> Result<FederatedDataset> {
        let inputs = spread_inputs(self.n_clients, self.pts_per_client, -self.span, self.span, derive_seed(seed, labels::PARTITION));
        self.toy.generate_at(&inputs, derive_seed(seed, labels::DATA))
    }

    fn training(&self, k: usize, eta: f64, seed: u64) -> TrainingConfig {
        TrainingConfig {
            algo: Algo::FedEnsemble,
            k,
            ages: self.max_ages,
            q: Some(k.min(self.n_clients)),
            clients_per_round: self.n_clients,
            tau: self.tau,
            eta,
            lr_decay: LrDecay::NONE,
            init: InitSpec::normal(self.init_sigma),
            seed,
            track_global_loss: false,
            exec: ExecMode::Sequential,
            ..TrainingConfig::default()
        }
    }
}

fn all_points(data: &FederatedDataset) -> (Vec<f64>, Vec<f64>) {
    data.points().map(|p| (p.x[0], p.y)).unzip()
}

/// Trains age by age until every mode's loss on the union data drops below
/// `tol` or `max_ages` is reached. Returns the initial ensemble, the final
/// one and the number of ages run.
pub fn train_until_converged(
    model: &Model,
    data: &FederatedDataset,
    cfg: &TrainingConfig,
    tol: f64,
    max_ages: usize,
) -> Result<(Ensemble, Ensemble, usize)> {
    let mut fed = Federation::new(model, data, cfg.clone())?;
    let init = fed.ensemble().clone();
    let mut ages = 0;
    while ages < max_ages {
        fed.run_age(ages)?;
        ages += 1;
        if fed.global_losses().iter().all(|&l| l < tol) {
            break;
        }
    }
    Ok((init, fed.into_ensemble(), ages))
}

/// Halves `eta` until a short run neither diverges nor ends with a higher
/// loss than it started with.
pub fn stable_step(model: &Model, data: &FederatedDataset, cfg: &TrainingConfig, probe_ages: usize) -> Result<f64> {
    let mut eta = cfg.eta;
    for _ in 0..40 {
        let trial = TrainingConfig {
            eta,
            ages: probe_ages,
            ..cfg.clone()
        };
        let mut fed = Federation::new(model, data, trial)?;
        let before = fed.global_losses();
        match fed.run() {
            Ok(_) => {
                let after = fed.global_losses();
                if after.iter().zip(&before).all(|(a, b)| a.is_finite() && a < b) {
                    return Ok(eta);
                }
            }
            Err(SimError::Divergence { .. }) => {}
            Err(e) => return Err(e),
        }
        eta /= 2.0;
    }
    Err(SimError::config("eta", "no stable step size found"))
}

/// Solves with the unregularized Gram matrix when it factorizes, so the
/// oracle itself adds no jitter bias.
fn exact_or_jittered(rbf: &RbfFeatureModel, xs: &[f64], ys: &[f64], sigma: f64) -> Result<GpPosterior> {
    match gp_posterior(rbf, xs, ys, sigma, Some(0.0)) {
        Err(SimError::Numerical { .. }) => gp_posterior(rbf, xs, ys, sigma, None),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAgreementRun {
    pub eta: f64,
    pub tau: usize,
    pub ages: usize,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAgreement {
    /// The stable step size, then the halved one.
    pub runs: Vec<MeanAgreementRun>,
}

fn max_mean_error(gp: &GpPosterior, model: &Model, init: &Ensemble, trained: &Ensemble, probes: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (w0, w) in init.modes.iter().zip(&trained.modes) {
        for &x in probes {
            let limit = gp.mean_from_init(w0, x);
            let got = model.predict(w, &[x])?[0];
            worst = worst.max((got - limit).abs());
        }
    }
    Ok(worst)
}

pub fn theorem2_mean(p: &Theorem2Params, seed: u64, _mode: ExecMode) -> Result<MeanAgreement> {
    let data = p.dataset(seed)?;
    let (model, rbf) = toy_rbf(p.n_centers, p.bandwidth, seed)?;
    let (xs, ys) = all_points(&data);
    let gp = exact_or_jittered(&rbf, &xs, &ys, p.init_sigma)?;
    let probes = toy_grid(p.n_mean_probes);
    let eta = stable_step(&model, &data, &p.training(p.k_mean, p.eta_start, seed), 20)?;
    let mut runs = Vec::new();
    for eta in [eta, eta / 2.0] {
        let cfg = p.training(p.k_mean, eta, seed);
        let (init, trained, ages) = train_until_converged(&model, &data, &cfg, p.converged_loss, p.max_ages)?;
        runs.push(MeanAgreementRun {
            eta,
            tau: p.tau,
            ages,
            max_abs_error: max_mean_error(&gp, &model, &init, &trained, &probes)?,
        });
    }
    Ok(MeanAgreement { runs })
}

pub fn theorem2_mean_checks(m: &MeanAgreement) -> Vec<Check> {
    let base = &m.runs[0];
    let half = &m.runs[1];
    let shrink = base.max_abs_error / half.max_abs_error;
    vec![
        Check::new(
            "mean_max_abs_error",
            base.max_abs_error <= 0.05,
            base.max_abs_error,
            format!("{:.3e} at eta {} tau {} after {} ages (<= 0.05)", base.max_abs_error, base.eta, base.tau, base.ages),
        ),
        Check::new(
            "mean_error_shrinks_with_half_step",
            shrink >= 2.0,
            shrink,
            format!(
                "error {:.3e} -> {:.3e} when eta halves, ratio {shrink:.2} (>= 2)",
                base.max_abs_error, half.max_abs_error
            ),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceAgreement {
    pub rows: Vec<OracleRow>,
    /// Sample correlation between mode 0 and mode 1 deviations at each probe.
    pub mode_correlations: Vec<f64>,
    pub n_inits: usize,
    pub eta: f64,
}

pub fn theorem2_cov(p: &Theorem2Params, seed: u64, mode: ExecMode) -> Result<CovarianceAgreement> {
    if p.k_cov < 2 {
        return Err(SimError::config("k_cov", "need two modes for the independence test"));
    }
    let data = p.dataset(seed)?;
    let (model, rbf) = toy_rbf(p.n_centers, p.bandwidth, seed)?;
    let (xs, ys) = all_points(&data);
    let gp = exact_or_jittered(&rbf, &xs, &ys, p.init_sigma)?;
    let eta = stable_step(&model, &data, &p.training(p.k_cov, p.eta_start, seed), 20)?;

    // preds[j][k][i]: init j, mode k, probe i.
    let preds = exec::try_map_indexed(mode, p.n_inits, |j| {
        let cfg = p.training(p.k_cov, eta, derive_seed(seed, &labels::repeat(j)));
        let (_, trained, _) = train_until_converged(&model, &data, &cfg, p.converged_loss, p.max_ages)?;
        trained
            .modes
            .iter()
            .map(|w| p.cov_probes.iter().map(|&x| Ok(model.predict(w, &[x])?[0])).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()
    })?;

    // Every converged mode is a sample from the same process, so all modes of all inits are pooled.
    let n_samples = (p.n_inits * p.k_cov) as f64;
    let mut rows = Vec::new();
    let mut mode_correlations = Vec::new();
    for (i, &x) in p.cov_probes.iter().enumerate() {
        let samples: Vec<f64> = preds.iter().flat_map(|modes| modes.iter().map(move |m| m[i])).collect();
        let mean = samples.iter().sum::<f64>() / n_samples;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_samples - 1.0);
        rows.push(OracleRow {
            probe_x: x,
            m_oracle: gp.mean(x),
            mean_empirical: mean,
            k_diag_oracle: gp.cov(x, x),
            var_empirical: var,
            n_repeats: p.n_inits,
        });
        let a: Vec<f64> = preds.iter().map(|m| m[0][i]).collect();
        let b: Vec<f64> = preds.iter().map(|m| m[1][i]).collect();
        mode_correlations.push(pearson(&a, &b));
    }
    Ok(CovarianceAgreement {
        rows,
        mode_correlations,
        n_inits: p.n_inits,
        eta,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Two-sided standard normal quantile at `1 - alpha / 2` (Acklam's rational approximation).
pub fn normal_quantile_two_sided(alpha: f64) -> f64 {
    let p = 1.0 - alpha / 2.0;
    let a = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    let b = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    let c = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    let d = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        let q = (-2.0 * q.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    };
    if p > 1.0 - 0.02425 {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    }
}

pub fn theorem2_cov_checks(c: &CovarianceAgreement) -> Vec<Check> {
    let mut checks = Vec::new();
    let scored: Vec<&OracleRow> = c.rows.iter().filter(|r| r.k_diag_oracle > 0.01).collect();
    let worst = scored
        .iter()
        .map(|r| (r.var_empirical - r.k_diag_oracle).abs() / r.k_diag_oracle)
        .fold(0.0f64, f64::max);
    checks.push(Check::new(
        "covariance_relative_error",
        !scored.is_empty() && worst <= 0.25,
        worst,
        format!("worst relative error {worst:.3} over {} probes with k(x,x) > 0.01 (<= 0.25)", scored.len()),
    ));
    // Fisher z-test per probe, Bonferroni-corrected so the family has 99% coverage.
    let n = c.n_inits as f64;
    let crit = normal_quantile_two_sided(0.01 / c.mode_correlations.len() as f64);
    let worst_z = c
        .mode_correlations
        .iter()
        .map(|rho| rho.atanh().abs() * (n - 3.0).sqrt())
        .fold(0.0f64, f64::max);
    checks.push(Check::new(
        "mode_independence",
        worst_z < crit,
        worst_z,
        format!("max |z| {worst_z:.3} vs critical {crit:.3}; rho = {:?}", c.mode_correlations.iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>()),
    ));
    checks
}

// ---------------------------------------------------------------------------
// Exponential decay of the training loss

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub n_clients: usize,
    pub pts_per_client: usize,
    pub span: f64,
    pub toy: ToySine,
    pub n_centers: usize,
    pub bandwidth: f64,
    pub k: usize,
    pub ages: usize,
    pub eta: f64,
    pub tau: usize,
    pub floor_quantile: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self {
            n_clients: 6,
            pts_per_client: 2,
            span: 0.9,
            toy: ToySine::default(),
            n_centers: RbfFeatureModel::DEFAULT_CENTERS,
            bandwidth: RbfFeatureModel::DEFAULT_BANDWIDTH,
            k: 3,
            ages: 150,
            eta: 0.05,
            tau: 5,
            floor_quantile: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDecayFit {
    pub mode: usize,
    pub rate: f64,
    pub r_squared: Option<f64>,
    pub window_start: usize,
    pub window_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayResult {
    pub records: Vec<crate::federation::RunRecord>,
    pub fits: Vec<ModeDecayFit>,
}

pub fn decay_check(p: &DecayParams, seed: u64, mode: ExecMode) -> Result<DecayResult> {
    let inputs = spread_inputs(p.n_clients, p.pts_per_client, -p.span, p.span, derive_seed(seed, labels::PARTITION));
    let data = p.toy.generate_at(&inputs, derive_seed(seed, labels::DATA))?;
    let (model, _) = toy_rbf(p.n_centers, p.bandwidth, seed)?;
    let cfg = TrainingConfig {
        algo: Algo::FedEnsemble,
        k: p.k,
        ages: p.ages,
        q: Some(p.k.min(p.n_clients)),
        clients_per_round: p.n_clients,
        tau: p.tau,
        eta: p.eta,
        lr_decay: LrDecay::NONE,
        seed,
        track_global_loss: true,
        exec: mode,
        ..TrainingConfig::default()
    };
    let (_, records) = run_training(&model, &data, &cfg)?;
    let fits = (0..p.k)
        .map(|k| {
            let trace: Vec<(usize, f64)> = records.iter().enumerate().map(|(r, rec)| (r, rec.mode_train_loss[k])).collect();
            let DecayFit {
                rate,
                r_squared,
                window,
                ..
            } = fit_decay(&trace, p.floor_quantile)?;
            Ok(ModeDecayFit {
                mode: k,
                rate,
                r_squared,
                window_start: window.0,
                window_end: window.1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecayResult { records, fits })
}

pub fn decay_checks(r: &DecayResult) -> Vec<Check> {
    let min_r2 = r.fits.iter().map(|f| f.r_squared.unwrap_or(f64::NAN)).fold(f64::INFINITY, f64::min);
    let min_rate = r.fits.iter().map(|f| f.rate).fold(f64::INFINITY, f64::min);
    vec![
        Check::new("decay_r_squared", min_r2 >= 0.95, min_r2, format!("min R^2 over modes {min_r2:.4} (>= 0.95)")),
        Check::new("decay_rate_positive", min_rate > 0.0, min_rate, format!("min rate {min_rate:.4e} per round (> 0)")),
    ]
}

// ---------------------------------------------------------------------------
// Label-skew sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NocSweepParams {
    pub data: SyntheticSpec,
    pub nocs: Vec<usize>,
    pub algos: Vec<Algo>,
    pub k: usize,
    pub total_rounds: usize,
    pub clients_per_round: usize,
    pub hidden: usize,
    pub eta: f64,
    pub tau: usize,
    pub prox_mu: f64,
    pub n_seeds: usize,
}

impl Default for NocSweepParams {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                n_per_class: 150,
                ..SyntheticSpec::default()
            },
            nocs: vec![2, 4, 6, 8, 10],
            algos: vec![Algo::FedAvg, Algo::FedProx, Algo::FedEnsemble],
            k: 5,
            total_rounds: 100,
            clients_per_round: 10,
            hidden: 64,
            eta: 0.5,
            tau: 5,
            prox_mu: 0.01,
            n_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NocRun {
    pub noc: usize,
    pub algo: Algo,
    pub seed_index: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NocSummary {
    pub noc: usize,
    pub fedavg: Option<f64>,
    pub fedprox: Option<f64>,
    pub fed_ensemble: Option<f64>,
    /// `fed_ensemble - fedavg`.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NocResult {
    pub runs: Vec<NocRun>,
    pub summary: Vec<NocSummary>,
    pub mode_stats: Vec<ModeStatsRow>,
}

impl NocResult {
    pub fn row(&self, noc: usize) -> Option<&NocSummary> {
        self.summary.iter().find(|s| s.noc == noc)
    }
}

pub fn noc_sweep(p: &NocSweepParams, seed: u64, mode: ExecMode) -> Result<NocResult> {
    let s = &p.data;
    let jobs: Vec<(usize, usize, Algo)> = p
        .nocs
        .iter()
        .flat_map(|&noc| (0..p.n_seeds).flat_map(move |j| p.algos.iter().map(move |&a| (noc, j, a))))
        .collect();
    let outcomes = exec::try_map_indexed(mode, jobs.len(), |i| {
        let (noc, j, algo) = jobs[i];
        // Data depend on the seed index only, so every algorithm sees the same split.
        let run_seed = derive_seed(seed, &labels::repeat(j));
        let pool = gen_synthetic_classification(s.n_classes, s.n_per_class, s.d_in, s.spread, derive_seed(run_seed, labels::DATA))?;
        let (train, test) = pool.train_test_split(s.test_fraction, derive_seed(run_seed, labels::SPLIT))?;
        let fed = partition_by_label(&train, s.n_clients, noc, derive_seed(run_seed, labels::PARTITION))?;
        let model = Model::Mlp(MlpModel::new(vec![s.d_in, p.hidden, s.n_classes], Activation::Tanh, crate::data::Task::Classification)?);
        let k = if algo == Algo::FedEnsemble { p.k } else { 1 };
        let cfg = TrainingConfig {
            algo,
            k,
            ages: p.total_rounds / k,
            q: Some(k),
            clients_per_round: p.clients_per_round,
            tau: p.tau,
            eta: p.eta,
            prox_mu: p.prox_mu,
            seed: run_seed,
            track_global_loss: false,
            exec: ExecMode::Sequential,
            ..TrainingConfig::default()
        };
        let (ens, _) = run_training(&model, &fed, &cfg)?;
        let acc = ensemble_accuracy(&ens, &model, &test.points)?;
        let stats = mode_stats(&ens, &model, &test.points)?;
        Ok::<_, SimError>((
            NocRun {
                noc,
                algo,
                seed_index: j,
                accuracy: acc,
            },
            ModeStatsRow {
                algo: format!("{}_noc{noc}", algo.name()),
                k,
                seed_base: run_seed,
                acc_max: stats.acc_max,
                acc_min: stats.acc_min,
                acc_mean: stats.mean_accuracy(),
                avg_entropy: stats.avg_entropy,
            },
        ))
    })?;
    let (runs, mode_stats): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let mean = |noc: usize, algo: Algo| {
        let accs: Vec<f64> = runs.iter().filter(|r| r.noc == noc && r.algo == algo).map(|r| r.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    let summary = p
        .nocs
        .iter()
        .map(|&noc| {
            let fedavg = mean(noc, Algo::FedAvg);
            let fed_ensemble = mean(noc, Algo::FedEnsemble);
            NocSummary {
                noc,
                fedavg,
                fedprox: mean(noc, Algo::FedProx),
                fed_ensemble,
                gap: fed_ensemble.zip(fedavg).map(|(e, a)| e - a),
            }
        })
        .collect();
    Ok(NocResult {
        runs,
        summary,
        mode_stats,
    })
}

pub fn noc_checks(r: &NocResult) -> Vec<Check> {
    let gap = |noc| r.row(noc).and_then(|s| s.gap);
    let mut checks = Vec::new();
    match gap(2) {
        Some(g) => checks.push(Check::new(
            "ensemble_beats_fedavg_noc2",
            g >= 0.0,
            g,
            format!("mean accuracy gap {g:+.4} at noc = 2 (>= 0)"),
        )),
        None => checks.push(Check::new("ensemble_beats_fedavg_noc2", false, f64::NAN, "noc = 2 not run")),
    }
    match (gap(2), gap(10)) {
        (Some(a), Some(b)) => checks.push(Check::new(
            "gap_larger_when_heterogeneous",
            a >= b,
            a - b,
            format!("gap {a:+.4} at noc = 2 vs {b:+.4} at noc = 10"),
        )),
        _ => checks.push(Check::new("gap_larger_when_heterogeneous", false, f64::NAN, "noc = 2 or 10 not run")),
    }
    checks
}

// ---------------------------------------------------------------------------
// Loss surface through three modes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub toy: ToySine,
    pub n_centers: usize,
    pub bandwidth: f64,
    pub ages: usize,
    pub eta: f64,
    pub tau: usize,
    pub grid_n: usize,
    pub margin: f64,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        Self {
            toy: ToySine::default(),
            n_centers: RbfFeatureModel::DEFAULT_CENTERS,
            bandwidth: RbfFeatureModel::DEFAULT_BANDWIDTH,
            ages: 40,
            eta: 0.1,
            tau: 5,
            grid_n: 41,
            margin: 0.25,
        }
    }
}

pub fn surface_fig(p: &SurfaceParams, seed: u64, mode: ExecMode) -> Result<(crate::analysis::SurfaceGrid, Vec<Check>)> {
    let data = p.toy.generate(derive_seed(seed, labels::DATA))?;
    let (model, _) = toy_rbf(p.n_centers, p.bandwidth, seed)?;
    let cfg = TrainingConfig {
        k: 3,
        ages: p.ages,
        q: Some(3),
        clients_per_round: data.n_clients(),
        tau: p.tau,
        eta: p.eta,
        seed,
        track_global_loss: false,
        exec: mode,
        ..TrainingConfig::default()
    };
    let (ens, _) = run_training(&model, &data, &cfg)?;
    let points: Vec<LabeledPoint> = data.points().cloned().collect();
    let [a, b, c] = [&ens.modes[0], &ens.modes[1], &ens.modes[2]];
    let grid = loss_surface_projection(a, b, c, &model, &points, p.grid_n, p.margin, mode)?;
    let anchor_loss = model.loss(&grid.weights_at(0.0, 0.0), &points);
    let checks = vec![Check::new(
        "anchor_consistency",
        anchor_loss == model.loss(a, &points),
        anchor_loss,
        "loss at the first anchor's plane coordinates equals its direct loss",
    )];
    Ok((grid, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let err = "table9".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("table1_biasvar") && err.contains("surface_fig"), "{err}");
    }

    #[test]
    fn normal_quantiles() {
        assert!((normal_quantile_two_sided(0.05) - 1.959964).abs() < 1e-5);
        assert!((normal_quantile_two_sided(0.01) - 2.575829).abs() < 1e-5);
        assert!((normal_quantile_two_sided(0.002) - 3.090232).abs() < 1e-5);
    }

    #[test]
    fn pearson_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_table1_emits_one_row_per_k() {
        let p = Table1Params {
            ks: vec![1, 2, 4],
            total_rounds: 8,
            n_repeats: 3,
            grid_n: 11,
            ..Table1Params::default()
        };
        let r = table1(&p, 1, ExecMode::Parallel).unwrap();
        assert_eq!(r.reports.iter().map(|x| x.k).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert_eq!(table1_checks(&r).len(), 5);
    }
}
