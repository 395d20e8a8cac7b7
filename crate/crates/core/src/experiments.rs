//! Config-driven experiments and the canned catalog behind the CLI.
//!
//! A config is one JSON document naming an experiment mode and its
//! parameters. [`run`] executes it and returns the verdict together with the
//! artifacts (`summary.json`, `metrics.csv`, and traces where the mode has
//! them) as bytes, so callers decide where they go.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diagnostics::{empirical_finite, moments, Samples, DEFAULT_BURN_IN};
use crate::error::{Error, Result};
use crate::kernels::{
    render_matrix, FiniteTarget, GaussianTarget, KernelSpec, Proposal, State, Target,
};
use crate::measure_sim::{propagate, propagate_unbounded_counterexample, verify_theorem4};
use crate::measures::{
    check_contraction, stationary_distribution, tv_distance, FiniteDistribution, StateSpace,
    StochasticMatrix,
};
use crate::pserver::{
    render_server_kernel, run_pserver, DelayModel, PserverOptions, PserverRecord, ServerMode,
};
use crate::rng::{stream, GENERATOR_STREAM};
use crate::schedules::random_schedule;
use crate::shmem::{replay, run_async, torn_state_stress, AsyncOptions, Pacing, RunRecord};

/// Empirical-vs-exact TV tolerance for finite targets.
pub const FINITE_TV_TOL: f64 = 0.02;
/// Detailed-balance tolerance for rendered server kernels.
pub const DETAILED_BALANCE_TOL: f64 = 1e-10;
pub const MEAN_TOL: f64 = 0.02;
pub const COVARIANCE_TOL: f64 = 0.05;
/// Errors must also lie within this many batch-means standard errors.
pub const SE_MULTIPLE: f64 = 3.0;
pub const NAIVE_INFLATION: f64 = 1.5;
pub const CORRECTED_VARIANCE_TOL: f64 = 0.10;
pub const N_BATCHES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Acceptance-criterion id this config reproduces, e.g. `AC6`.
    pub criterion: String,
    /// A reduced-size companion run rather than the full criterion.
    #[serde(default, skip_serializing_if = "is_false")]
    pub smoke: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Experiment {
    MeasureSim(MeasureSimSpec),
    MeasureCampaign(CampaignSpec),
    ContractionCampaign(ContractionSpec),
    Counterexample(CounterexampleSpec),
    ShmemReal(ShmemRealSpec),
    ShmemReplay(ShmemReplaySpec),
    Pserver(PserverSpec),
    PserverPaired(PairedSpec),
    DeterminismAudit(AuditSpec),
    TornState(TornSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Unnormalized weights; `site_sizes` defaults to a single site.
    Finite {
        weights: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        site_sizes: Option<Vec<usize>>,
    },
    BivariateGaussian {
        rho: f64,
    },
    Gaussian {
        mean: Vec<f64>,
        precision: Vec<Vec<f64>>,
    },
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        match self {
            TargetSpec::Finite {
                weights,
                site_sizes,
            } => {
                let sizes = site_sizes.clone().unwrap_or_else(|| vec![weights.len()]);
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::Parameter(
                        "finite weights must be finite and non-negative".into(),
                    ));
                }
                let logw = weights.iter().map(|w| w.ln()).collect();
                Ok(Target::Finite(FiniteTarget::new(sizes, logw)?))
            }
            TargetSpec::BivariateGaussian { rho } => {
                Ok(Target::Gaussian(GaussianTarget::bivariate(*rho)?))
            }
            TargetSpec::Gaussian { mean, precision } => Ok(Target::Gaussian(GaussianTarget::new(
                mean.clone(),
                precision.clone(),
            )?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    MetropolisHastings {
        proposal: Proposal,
    },
    Gibbs,
    SystematicGibbs {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<Vec<usize>>,
    },
}

impl KernelConfig {
    pub fn build(&self, target: Target) -> Result<KernelSpec> {
        let target = Arc::new(target);
        match self {
            KernelConfig::MetropolisHastings { proposal } => {
                KernelSpec::metropolis_hastings(target, proposal.clone())
            }
            KernelConfig::Gibbs => KernelSpec::gibbs(target),
            KernelConfig::SystematicGibbs { order } => {
                KernelSpec::systematic_gibbs(target, order.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    #[default]
    Uniform,
    PointMass {
        index: usize,
    },
    Probs {
        probs: Vec<f64>,
    },
}

impl InitialSpec {
    fn build(&self, space: StateSpace) -> Result<FiniteDistribution> {
        match self {
            InitialSpec::Uniform => Ok(FiniteDistribution::uniform(space)),
            InitialSpec::PointMass { index } => FiniteDistribution::point_mass(space, *index),
            InitialSpec::Probs { probs } => FiniteDistribution::new(space, probs.clone()),
        }
    }
}

fn default_burn_in() -> f64 {
    DEFAULT_BURN_IN
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSimSpec {
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub workers: usize,
    pub staleness_bound: u64,
    pub horizon: usize,
    #[serde(default)]
    pub initial: InitialSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub trials: usize,
    pub max_states: usize,
    pub max_workers: usize,
    pub max_bound: u64,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionSpec {
    pub trials: usize,
    pub max_states: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSpec {
    pub matrix: Vec<Vec<f64>>,
    pub initial_state: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShmemRealSpec {
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub workers: usize,
    pub horizon: u64,
    pub watchdog: u64,
    #[serde(default)]
    pub pacing: Pacing,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShmemReplaySpec {
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub workers: usize,
    pub staleness_bound: u64,
    pub horizon: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PserverSpec {
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub workers: usize,
    pub horizon: u64,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default)]
    pub correction: ServerMode,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default = "one")]
    pub thin: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "yes")]
    pub record_trace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSpec {
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub workers: usize,
    pub horizon: u64,
    pub delay: DelayModel,
    #[serde(default = "one")]
    pub thin: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    /// Names of canned configs to run twice.
    pub configs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TornSpec {
    pub threads: usize,
    pub operations: u64,
}

impl Experiment {
    pub fn mode(&self) -> &'static str {
        match self {
            Experiment::MeasureSim(_) => "measure_sim",
            Experiment::MeasureCampaign(_) => "measure_campaign",
            Experiment::ContractionCampaign(_) => "contraction_campaign",
            Experiment::Counterexample(_) => "counterexample",
            Experiment::ShmemReal(_) => "shmem_real",
            Experiment::ShmemReplay(_) => "shmem_replay",
            Experiment::Pserver(_) => "pserver",
            Experiment::PserverPaired(_) => "pserver_paired",
            Experiment::DeterminismAudit(_) => "determinism_audit",
            Experiment::TornState(_) => "torn_state",
        }
    }

    /// Whether identical configs give identical artifacts.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Experiment::ShmemReal(_) | Experiment::TornState(_))
    }
}

fn field(path: &str, cond: bool, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(path, message))
    }
}

fn check_fraction(path: &str, f: f64) -> Result<()> {
    field(path, (0.0..1.0).contains(&f), "must lie in [0, 1)")
}

/// Tagged enums buffer their content, which hides the failing field. This
/// re-reads the selected mode's body directly to recover the full path.
fn refine_experiment_error(text: &str) -> Option<Error> {
    let root: Value = serde_json::from_str(text).ok()?;
    let mut body = root.get("experiment")?.as_object()?.clone();
    let mode = body.remove("mode")?.as_str()?.to_string();
    let body = Value::Object(body);
    fn probe<T: serde::de::DeserializeOwned>(body: Value) -> Option<Error> {
        serde_path_to_error::deserialize::<_, T>(body)
            .err()
            .map(|e| {
                let path = e.path().to_string();
                let path = if path == "." {
                    "experiment".to_string()
                } else {
                    format!("experiment.{path}")
                };
                Error::config(path, e.into_inner().to_string())
            })
    }
    match mode.as_str() {
        "measure_sim" => probe::<MeasureSimSpec>(body),
        "measure_campaign" => probe::<CampaignSpec>(body),
        "contraction_campaign" => probe::<ContractionSpec>(body),
        "counterexample" => probe::<CounterexampleSpec>(body),
        "shmem_real" => probe::<ShmemRealSpec>(body),
        "shmem_replay" => probe::<ShmemReplaySpec>(body),
        "pserver" => probe::<PserverSpec>(body),
        "pserver_paired" => probe::<PairedSpec>(body),
        "determinism_audit" => probe::<AuditSpec>(body),
        "torn_state" => probe::<TornSpec>(body),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = match serde_path_to_error::deserialize(de) {
            Ok(c) => c,
            Err(e) => {
                let path = e.path().to_string();
                let err = Error::config(&path, e.into_inner().to_string());
                return Err(if path == "experiment" {
                    refine_experiment_error(text).unwrap_or(err)
                } else {
                    err
                });
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    /// Checks the mode-specific parameter constraints.
    pub fn validate(&self) -> Result<()> {
        field("name", !self.name.trim().is_empty(), "must not be empty")?;
        let e = "experiment";
        match &self.experiment {
            Experiment::MeasureSim(s) => {
                field(
                    &format!("{e}.workers"),
                    s.workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.staleness_bound"),
                    s.staleness_bound >= s.workers as u64,
                    format!("bound {} is below {} workers", s.staleness_bound, s.workers),
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon as u64 >= s.staleness_bound.max(1),
                    "horizon must be at least the staleness bound",
                )?;
            }
            Experiment::MeasureCampaign(s) => {
                field(
                    &format!("{e}.trials"),
                    s.trials >= 1,
                    "need at least one trial",
                )?;
                field(
                    &format!("{e}.max_states"),
                    (2..=64).contains(&s.max_states),
                    "must lie in 2..=64",
                )?;
                field(
                    &format!("{e}.max_workers"),
                    s.max_workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.max_bound"),
                    s.max_bound >= s.max_workers as u64,
                    "bound must admit the largest worker count",
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon as u64 >= s.max_bound,
                    "horizon below the bound",
                )?;
            }
            Experiment::ContractionCampaign(s) => {
                field(
                    &format!("{e}.trials"),
                    s.trials >= 1,
                    "need at least one trial",
                )?;
                field(
                    &format!("{e}.max_states"),
                    (2..=64).contains(&s.max_states),
                    "must lie in 2..=64",
                )?;
            }
            Experiment::Counterexample(s) => {
                field(
                    &format!("{e}.horizon"),
                    s.horizon >= 10,
                    "must be at least 10",
                )?;
                field(
                    &format!("{e}.initial_state"),
                    s.initial_state < s.matrix.len(),
                    "out of range",
                )?;
            }
            Experiment::ShmemReal(s) => {
                field(
                    &format!("{e}.workers"),
                    s.workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon >= 1,
                    "must be at least 1",
                )?;
                field(
                    &format!("{e}.watchdog"),
                    s.watchdog >= s.workers as u64,
                    format!("bound {} is below {} workers", s.watchdog, s.workers),
                )?;
                check_fraction(&format!("{e}.burn_in"), s.burn_in)?;
            }
            Experiment::ShmemReplay(s) => {
                field(
                    &format!("{e}.workers"),
                    s.workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.staleness_bound"),
                    s.staleness_bound >= s.workers as u64,
                    format!("bound {} is below {} workers", s.staleness_bound, s.workers),
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon as u64 >= s.staleness_bound,
                    "horizon must be at least the staleness bound",
                )?;
                check_fraction(&format!("{e}.burn_in"), s.burn_in)?;
            }
            Experiment::Pserver(s) => {
                field(
                    &format!("{e}.workers"),
                    s.workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon >= 1,
                    "must be at least 1",
                )?;
                field(
                    &format!("{e}.replicas"),
                    (1..=s.workers).contains(&s.replicas),
                    "must lie between 1 and the worker count",
                )?;
                field(&format!("{e}.thin"), s.thin >= 1, "must be at least 1")?;
                check_fraction(&format!("{e}.burn_in"), s.burn_in)?;
            }
            Experiment::PserverPaired(s) => {
                field(
                    &format!("{e}.workers"),
                    s.workers >= 1,
                    "need at least one worker",
                )?;
                field(
                    &format!("{e}.horizon"),
                    s.horizon >= 1,
                    "must be at least 1",
                )?;
                field(&format!("{e}.thin"), s.thin >= 1, "must be at least 1")?;
                check_fraction(&format!("{e}.burn_in"), s.burn_in)?;
            }
            Experiment::DeterminismAudit(s) => {
                field(
                    &format!("{e}.configs"),
                    !s.configs.is_empty(),
                    "list at least one config",
                )?;
                for (i, name) in s.configs.iter().enumerate() {
                    let path = format!("{e}.configs[{i}]");
                    let cfg = find_canned(name).ok_or_else(|| {
                        Error::config(&path, format!("no canned config named `{name}`"))
                    })?;
                    field(
                        &path,
                        cfg.experiment.is_deterministic(),
                        format!("`{name}` is not deterministic"),
                    )?;
                    field(
                        &path,
                        !matches!(cfg.experiment, Experiment::DeterminismAudit(_)),
                        "audits cannot nest",
                    )?;
                }
            }
            Experiment::TornState(s) => {
                field(
                    &format!("{e}.threads"),
                    s.threads >= 1,
                    "need at least one thread",
                )?;
                field(
                    &format!("{e}.operations"),
                    s.operations >= 1,
                    "must be at least 1",
                )?;
            }
        }
        Ok(())
    }
}

/// A named output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub file_name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub criterion: String,
    pub passed: bool,
    /// One line for terminal output.
    pub headline: String,
    pub summary: Value,
    /// `summary.json` first, then `metrics.csv`, then mode-specific files.
    pub artifacts: Vec<Artifact>,
}

impl Outcome {
    pub fn artifact(&self, file_name: &str) -> Option<&[u8]> {
        self.artifacts
            .iter()
            .find(|a| a.file_name == file_name)
            .map(|a| a.bytes.as_slice())
    }

    /// Writes every artifact into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for a in &self.artifacts {
            fs::write(dir.join(&a.file_name), &a.bytes)?;
        }
        Ok(())
    }
}

struct Report {
    passed: bool,
    headline: String,
    results: Value,
    metrics: Vec<u8>,
    extra: Vec<Artifact>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seed = cfg.seed;
    let report = match &cfg.experiment {
        Experiment::MeasureSim(s) => run_measure_sim(s, seed)?,
        Experiment::MeasureCampaign(s) => run_campaign(s, seed)?,
        Experiment::ContractionCampaign(s) => run_contraction(s, seed)?,
        Experiment::Counterexample(s) => run_counterexample(s)?,
        Experiment::ShmemReal(s) => run_shmem_real(s, seed)?,
        Experiment::ShmemReplay(s) => run_shmem_replay(s, seed)?,
        Experiment::Pserver(s) => run_pserver_experiment(s, seed)?,
        Experiment::PserverPaired(s) => run_paired(s, seed)?,
        Experiment::DeterminismAudit(s) => run_audit(s)?,
        Experiment::TornState(s) => run_torn(s, seed)?,
    };
    let summary = json!({
        "name": cfg.name,
        "criterion": cfg.criterion,
        "mode": cfg.experiment.mode(),
        "seed": seed,
        "passed": report.passed,
        "results": report.results,
    });
    let mut summary_bytes = serde_json::to_vec_pretty(&summary)?;
    summary_bytes.push(b'\n');
    let mut artifacts = vec![
        Artifact {
            file_name: "summary.json".into(),
            bytes: summary_bytes,
        },
        Artifact {
            file_name: "metrics.csv".into(),
            bytes: report.metrics,
        },
    ];
    artifacts.extend(report.extra);
    Ok(Outcome {
        name: cfg.name.clone(),
        criterion: cfg.criterion.clone(),
        passed: report.passed,
        headline: report.headline,
        summary,
        artifacts,
    })
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn finite_kernel(target: &TargetSpec, kernel: &KernelConfig) -> Result<(KernelSpec, FiniteTarget)> {
    let k = kernel.build(target.build()?)?;
    let t = k
        .target()
        .as_finite()
        .cloned()
        .ok_or_else(|| Error::UnsupportedTarget("this mode needs a finite target".into()))?;
    Ok((k, t))
}

fn run_measure_sim(s: &MeasureSimSpec, seed: u64) -> Result<Report> {
    let (k, t) = finite_kernel(&s.target, &s.kernel)?;
    let matrix = render_matrix(&k)?;
    let mu0 = s.initial.build(t.space())?;
    let mut rng = stream(seed, GENERATOR_STREAM);
    let schedule = random_schedule(s.workers, s.staleness_bound, s.horizon, &mut rng)?;
    let trace = propagate(&matrix, &mu0, &schedule)?;
    let report = verify_theorem4(&trace)?;
    let mut metrics = Vec::new();
    trace.write_csv(&mut metrics)?;
    let mut jsonl = Vec::new();
    schedule.to_jsonl(&mut jsonl)?;
    Ok(Report {
        passed: report.passed(),
        headline: format!(
            "d_N = {:.3e} after {} writes, {} violations",
            report.final_distance,
            report.horizon,
            report.violations.len()
        ),
        results: serde_json::to_value(&report)?,
        metrics,
        extra: vec![Artifact {
            file_name: "trace.jsonl".into(),
            bytes: jsonl,
        }],
    })
}

fn exp_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| Exp1.sample(rng)).collect()
}

/// A random kernel `P = R/2 + 1 nu / 2` with `R` a random stochastic matrix
/// and `nu` a random positive distribution. Every row keeps half its mass on
/// `nu`, so `P` contracts TV by at least one half per application.
pub fn random_minorized_kernel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<StochasticMatrix> {
    let nu = normalize(exp_weights(n, rng));
    let rows = (0..n)
        .map(|_| {
            let mut r = exp_weights(n, rng);
            // sparsify the free half
            for v in r.iter_mut() {
                if rng.random_bool(0.4) {
                    *v = 0.0;
                }
            }
            if r.iter().all(|v| *v == 0.0) {
                r[rng.random_range(0..n)] = 1.0;
            }
            let r = normalize(r);
            r.iter().zip(&nu).map(|(a, b)| 0.5 * a + 0.5 * b).collect()
        })
        .collect();
    StochasticMatrix::new(StateSpace::indexed(n)?, rows)
}

/// A random sparse kernel, redrawn until it is irreducible and aperiodic.
pub fn random_sparse_ergodic_kernel<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
) -> Result<StochasticMatrix> {
    loop {
        let density = rng.random_range(0.3..1.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r: Vec<f64> = exp_weights(n, rng)
                    .into_iter()
                    .map(|w| if rng.random_bool(density) { w } else { 0.0 })
                    .collect();
                if r.iter().all(|v| *v == 0.0) {
                    r[rng.random_range(0..n)] = 1.0;
                }
                normalize(r)
            })
            .collect();
        let m = StochasticMatrix::new(StateSpace::indexed(n)?, rows)?;
        if m.is_ergodic() {
            return Ok(m);
        }
    }
}

/// A random distribution: a point mass a third of the time, otherwise
/// random exponential weights.
pub fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<FiniteDistribution> {
    let space = StateSpace::indexed(n)?;
    if rng.random_bool(1.0 / 3.0) {
        FiniteDistribution::point_mass(space, rng.random_range(0..n))
    } else {
        FiniteDistribution::new(space, normalize(exp_weights(n, rng)))
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    // absorb rounding so rows sum to one within tolerance
    let s: f64 = v.iter().sum();
    if let Some(last) = v.iter_mut().rev().find(|x| **x > 0.0) {
        *last += 1.0 - s;
    }
    v
}

fn run_campaign(s: &CampaignSpec, seed: u64) -> Result<Report> {
    let mut rng = stream(seed, GENERATOR_STREAM);
    let mut rows = Vec::with_capacity(s.trials);
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    let mut first_failure = Value::Null;
    for trial in 0..s.trials {
        let n = rng.random_range(2..=s.max_states);
        let m = rng.random_range(1..=s.max_workers);
        let b = rng.random_range(m as u64..=s.max_bound);
        let kernel = random_minorized_kernel(n, &mut rng)?;
        let mu0 = random_distribution(n, &mut rng)?;
        let schedule = random_schedule(m, b, s.horizon, &mut rng)?;
        let trace = propagate(&kernel, &mu0, &schedule)?;
        let report = verify_theorem4(&trace)?;
        worst = worst.max(report.final_distance);
        if !report.passed() {
            failures += 1;
            if first_failure.is_null() {
                first_failure = json!({ "trial": trial, "violations": report.violations });
            }
        }
        rows.push(vec![
            trial.to_string(),
            n.to_string(),
            m.to_string(),
            b.to_string(),
            format!("{:e}", report.final_distance),
            report.violations.len().to_string(),
        ]);
    }
    Ok(Report {
        passed: failures == 0,
        headline: format!(
            "{} trials, {failures} with violations, max d_N = {worst:.3e}",
            s.trials
        ),
        results: json!({
            "trials": s.trials,
            "trials_with_violations": failures,
            "max_final_distance": worst,
            "first_failure": first_failure,
        }),
        metrics: csv_bytes(
            &[
                "trial",
                "states",
                "workers",
                "bound",
                "final_distance",
                "violations",
            ],
            rows,
        )?,
        extra: Vec::new(),
    })
}

fn run_contraction(s: &ContractionSpec, seed: u64) -> Result<Report> {
    let mut rng = stream(seed, GENERATOR_STREAM);
    let mut rows = Vec::with_capacity(s.trials);
    let mut failures = 0usize;
    let mut worst_gap = f64::NEG_INFINITY;
    for trial in 0..s.trials {
        let n = rng.random_range(2..=s.max_states);
        let kernel = random_sparse_ergodic_kernel(n, &mut rng)?;
        let pi = stationary_distribution(&kernel)?;
        let mu = random_distribution(n, &mut rng)?;
        let c = check_contraction(&kernel, &mu, &pi)?;
        worst_gap = worst_gap.max(c.after - c.before);
        if !c.contracted {
            failures += 1;
        }
        rows.push(vec![
            trial.to_string(),
            n.to_string(),
            format!("{:e}", c.before),
            format!("{:e}", c.after),
        ]);
    }
    Ok(Report {
        passed: failures == 0,
        headline: format!(
            "{} pairs, {failures} expansions, max TV increase {worst_gap:.3e}",
            s.trials
        ),
        results: json!({
            "trials": s.trials,
            "expansions": failures,
            "max_increase": worst_gap,
        }),
        metrics: csv_bytes(&["trial", "states", "tv_before", "tv_after"], rows)?,
        extra: Vec::new(),
    })
}

fn run_counterexample(s: &CounterexampleSpec) -> Result<Report> {
    let n = s.matrix.len();
    let kernel = StochasticMatrix::new(StateSpace::indexed(n)?, s.matrix.clone())?;
    let mu0 = FiniteDistribution::point_mass(StateSpace::indexed(n)?, s.initial_state)?;
    let trace = propagate_unbounded_counterexample(&kernel, &mu0, s.horizon)?;
    let d1 = trace.d[1];
    let tail = &trace.d[s.horizon / 2..];
    let tail_sup = tail.iter().copied().fold(0.0, f64::max);
    let tail_inf = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let converged = tail_sup < d1 / 2.0;
    let mut metrics = Vec::new();
    trace.write_csv(&mut metrics)?;
    let mut jsonl = Vec::new();
    trace.schedule.to_jsonl(&mut jsonl)?;
    Ok(Report {
        passed: !converged,
        headline: format!(
            "d_1 = {d1:.4}, sup of d_k over the second half = {tail_sup:.4}: {}",
            if converged {
                "converged"
            } else {
                "does not converge"
            }
        ),
        results: json!({
            "d_1": d1,
            "tail_sup": tail_sup,
            "tail_inf": tail_inf,
            "final_distance": trace.final_distance(),
            "converged_below_half_d1": converged,
        }),
        metrics,
        extra: vec![Artifact {
            file_name: "trace.jsonl".into(),
            bytes: jsonl,
        }],
    })
}

fn finite_state_report(
    t: &FiniteTarget,
    emp: &FiniteDistribution,
) -> Result<(f64, Vec<Vec<String>>)> {
    let pi = t.distribution();
    let tv = tv_distance(emp, &pi)?;
    let rows = (0..t.num_states())
        .map(|i| {
            vec![
                State::Discrete(t.state_at(i)).label(),
                emp.probs()[i].to_string(),
                pi.probs()[i].to_string(),
            ]
        })
        .collect();
    Ok((tv, rows))
}

fn record_empirical(rec: &RunRecord, t: &FiniteTarget, burn_in: f64) -> Result<FiniteDistribution> {
    let mut s = Samples::new(t.site_sizes().len());
    for st in rec.late_states(burn_in) {
        s.push(&st.coords())?;
    }
    empirical_finite(t, &s)
}

fn shmem_report(rec: RunRecord, t: &FiniteTarget, burn_in: f64) -> Result<Report> {
    let emp = record_empirical(&rec, t, burn_in)?;
    let (tv, rows) = finite_state_report(t, &emp)?;
    let mut jsonl = Vec::new();
    rec.trace.to_jsonl(&mut jsonl)?;
    let mut samples = Vec::new();
    rec.write_samples_csv(&mut samples)?;
    let passed = tv <= FINITE_TV_TOL && rec.trace.validate().is_ok();
    Ok(Report {
        passed,
        headline: format!(
            "{} writes, max staleness {}, late-window TV {tv:.4}",
            rec.samples.len(),
            rec.trace.max_staleness()
        ),
        results: json!({
            "writes": rec.samples.len(),
            "workers": rec.trace.workers,
            "max_staleness": rec.trace.max_staleness(),
            "trace_bound": rec.trace.staleness_bound,
            "trace_valid": rec.trace.validate().is_ok(),
            "burn_in": burn_in,
            "tv_to_target": tv,
            "tolerance": FINITE_TV_TOL,
        }),
        metrics: csv_bytes(&["state", "empirical", "target"], rows)?,
        extra: vec![
            Artifact {
                file_name: "trace.jsonl".into(),
                bytes: jsonl,
            },
            Artifact {
                file_name: "samples.csv".into(),
                bytes: samples,
            },
        ],
    })
}

fn run_shmem_real(s: &ShmemRealSpec, seed: u64) -> Result<Report> {
    let (k, t) = finite_kernel(&s.target, &s.kernel)?;
    let mut opts = AsyncOptions::new(s.workers, s.horizon, seed, s.watchdog);
    opts.pacing = s.pacing;
    let rec = run_async(&k, &opts)?;
    shmem_report(rec, &t, s.burn_in)
}

fn run_shmem_replay(s: &ShmemReplaySpec, seed: u64) -> Result<Report> {
    let (k, t) = finite_kernel(&s.target, &s.kernel)?;
    let schedule = random_schedule(
        s.workers,
        s.staleness_bound,
        s.horizon,
        &mut stream(seed, GENERATOR_STREAM),
    )?;
    let rec = replay(&k, &schedule, seed, None)?;
    shmem_report(rec, &t, s.burn_in)
}

fn pserver_options(
    workers: usize,
    horizon: u64,
    seed: u64,
    delay: &DelayModel,
    thin: u64,
) -> PserverOptions {
    let mut o = PserverOptions::new(workers, horizon, seed);
    o.delay = delay.clone();
    o.thin = thin;
    o
}

fn pserver_artifacts(rec: &PserverRecord) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    if let Some(trace) = &rec.trace {
        let mut jsonl = Vec::new();
        trace.to_jsonl(&mut jsonl)?;
        out.push(Artifact {
            file_name: "trace.jsonl".into(),
            bytes: jsonl,
        });
        let mut messages = Vec::new();
        rec.write_messages_csv(&mut messages)?;
        out.push(Artifact {
            file_name: "messages.csv".into(),
            bytes: messages,
        });
    }
    Ok(out)
}

fn pserver_counts(rec: &PserverRecord) -> Value {
    json!({
        "sent": rec.sent,
        "received": rec.received,
        "accepted": rec.accepted,
        "rejected": rec.rejected,
        "accept_rate": rec.accept_rate(),
        "max_staleness": rec.max_staleness,
        "diverged_at": rec.diverged_at,
        "workers": rec.workers,
    })
}

fn run_pserver_experiment(s: &PserverSpec, seed: u64) -> Result<Report> {
    let k = s.kernel.build(s.target.build()?)?;
    let mut o = pserver_options(s.workers, s.horizon, seed, &s.delay, s.thin);
    o.mode = s.correction;
    o.replicas = s.replicas;
    o.record_trace = s.record_trace;
    let rec = run_pserver(&k, &o)?;
    let late = rec.samples.after_burn_in(s.burn_in);
    let dim = k.target().dim();
    let counts = pserver_counts(&rec);
    let extra = pserver_artifacts(&rec)?;

    if let Some(t) = k.target().as_finite() {
        let mut rows = Vec::new();
        let mut tvs = Vec::new();
        for r in 0..s.replicas {
            let emp = empirical_finite(t, &late.columns(r * dim, dim))?;
            let (tv, state_rows) = finite_state_report(t, &emp)?;
            tvs.push(tv);
            rows.extend(state_rows.into_iter().map(|mut row| {
                row.insert(0, r.to_string());
                row
            }));
        }
        let correlation =
            (s.replicas >= 2 && dim == 1).then(|| pearson(&late.column(0), &late.column(1)));
        let instantaneous = s.workers == 1 && s.delay.staleness_cap == 0;
        let balance = if instantaneous && s.correction == ServerMode::MhCorrected {
            Some(detailed_balance_residual(&render_server_kernel(&k)?)?)
        } else {
            None
        };
        let worst = tvs.iter().copied().fold(0.0, f64::max);
        let passed = worst <= FINITE_TV_TOL
            && balance.is_none_or(|b| b <= DETAILED_BALANCE_TOL)
            && rec.diverged_at.is_none();
        let mut headline = format!("{} messages, worst replica TV {worst:.4}", rec.received);
        if let Some(b) = balance {
            headline.push_str(&format!(", detailed-balance residual {b:.1e}"));
        }
        return Ok(Report {
            passed,
            headline,
            results: json!({
                "counts": counts,
                "burn_in": s.burn_in,
                "replica_tv": tvs,
                "replica_correlation": correlation,
                "detailed_balance_residual": balance,
                "tolerance": FINITE_TV_TOL,
            }),
            metrics: csv_bytes(&["replica", "state", "empirical", "target"], rows)?,
            extra,
        });
    }

    let g = k.target().as_gaussian().ok_or_else(|| {
        Error::UnsupportedTarget("pserver experiments need a finite or Gaussian target".into())
    })?;
    if rec.diverged_at.is_some() || !late.all_finite() {
        return Ok(Report {
            passed: false,
            headline: format!("diverged at message {:?}", rec.diverged_at),
            results: json!({ "counts": counts }),
            metrics: csv_bytes(
                &["quantity", "estimate", "truth", "se", "error"],
                Vec::<Vec<String>>::new(),
            )?,
            extra,
        });
    }
    let rep = moments(&late, N_BATCHES)?;
    let cov = g.covariance();
    let mut rows = Vec::new();
    let mut passed = true;
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    let mut worst_se_multiple = 0.0f64;
    for r in 0..s.replicas {
        for i in 0..dim {
            let a = r * dim + i;
            let err = rep.mean[a] - g.mean()[i];
            worst_mean = worst_mean.max(err.abs());
            worst_se_multiple = worst_se_multiple.max(err.abs() / rep.mean_se[a]);
            passed &= err.abs() <= MEAN_TOL && err.abs() <= SE_MULTIPLE * rep.mean_se[a];
            rows.push(vec![
                format!("mean[{a}]"),
                rep.mean[a].to_string(),
                g.mean()[i].to_string(),
                rep.mean_se[a].to_string(),
                err.to_string(),
            ]);
        }
        for i in 0..dim {
            for j in i..dim {
                let (a, b) = (r * dim + i, r * dim + j);
                let err = rep.covariance[a][b] - cov[i][j];
                let se = rep.covariance_se[a][b];
                worst_cov = worst_cov.max(err.abs());
                worst_se_multiple = worst_se_multiple.max(err.abs() / se);
                passed &= err.abs() <= COVARIANCE_TOL && err.abs() <= SE_MULTIPLE * se;
                rows.push(vec![
                    format!("cov[{a},{b}]"),
                    rep.covariance[a][b].to_string(),
                    cov[i][j].to_string(),
                    se.to_string(),
                    err.to_string(),
                ]);
            }
        }
    }
    let sensitivity = crate::diagnostics::burn_in_sensitivity(&rec.samples, N_BATCHES)?;
    let sensitivity: Vec<Value> = sensitivity
        .iter()
        .map(|s| json!({ "fraction": s.fraction, "mean": s.report.mean, "covariance": s.report.covariance }))
        .collect();
    Ok(Report {
        passed,
        headline: format!(
            "{} messages, accept rate {:.3}, max |mean error| {worst_mean:.4}, max |cov error| {worst_cov:.4}, max error/SE {worst_se_multiple:.2}",
            rec.received,
            rec.accept_rate()
        ),
        results: json!({
            "counts": counts,
            "burn_in": s.burn_in,
            "moments": rep,
            "max_mean_error": worst_mean,
            "max_covariance_error": worst_cov,
            "max_error_over_se": worst_se_multiple,
            "burn_in_sensitivity": sensitivity,
            "tolerances": { "mean": MEAN_TOL, "covariance": COVARIANCE_TOL, "se_multiple": SE_MULTIPLE },
        }),
        metrics: csv_bytes(&["quantity", "estimate", "truth", "se", "error"], rows)?,
        extra,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Largest `|pi_i P_ij - pi_j P_ji|` with `pi` the stationary distribution.
pub fn detailed_balance_residual(m: &StochasticMatrix) -> Result<f64> {
    let pi = stationary_distribution(m)?;
    let p = pi.probs();
    let n = m.n();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((p[i] * m.get(i, j) - p[j] * m.get(j, i)).abs());
        }
    }
    Ok(worst)
}

fn run_paired(s: &PairedSpec, seed: u64) -> Result<Report> {
    let k = s.kernel.build(s.target.build()?)?;
    let g = k.target().as_gaussian().cloned().ok_or_else(|| {
        Error::UnsupportedTarget("the paired control needs a Gaussian target".into())
    })?;
    let cov = g.covariance();
    let dim = g.dim();
    let mut rows = Vec::new();
    let mut by_mode = Vec::new();
    for mode in [ServerMode::NaiveAccept, ServerMode::MhCorrected] {
        let mut o = pserver_options(s.workers, s.horizon, seed, &s.delay, s.thin);
        o.mode = mode;
        o.record_trace = false;
        let rec = run_pserver(&k, &o)?;
        let late = rec.samples.after_burn_in(s.burn_in);
        // A diverged or non-finite run has unbounded variance.
        let (variances, ses) = if rec.diverged_at.is_some() || !late.all_finite() {
            (vec![f64::INFINITY; dim], vec![f64::NAN; dim])
        } else {
            let rep = moments(&late, N_BATCHES)?;
            (
                (0..dim).map(|i| rep.covariance[i][i]).collect(),
                (0..dim).map(|i| rep.covariance_se[i][i]).collect(),
            )
        };
        let ratios: Vec<f64> = (0..dim).map(|i| variances[i] / cov[i][i]).collect();
        for i in 0..dim {
            rows.push(vec![
                mode_name(mode).to_string(),
                i.to_string(),
                variances[i].to_string(),
                ses[i].to_string(),
                cov[i][i].to_string(),
                ratios[i].to_string(),
            ]);
        }
        by_mode.push((mode, rec, ratios));
    }
    let naive = &by_mode[0];
    let corrected = &by_mode[1];
    let naive_ok = naive.2.iter().all(|r| *r >= NAIVE_INFLATION);
    let corrected_ok = corrected
        .2
        .iter()
        .all(|r| (r - 1.0).abs() <= CORRECTED_VARIANCE_TOL);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|r| format!("{r:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let ratio_json = |v: &[f64]| -> Value {
        v.iter()
            .map(|r| {
                if r.is_finite() {
                    json!(r)
                } else {
                    json!("inf")
                }
            })
            .collect()
    };
    Ok(Report {
        passed: naive_ok && corrected_ok,
        headline: format!(
            "variance / truth: naive {}, corrected {}",
            fmt(&naive.2),
            fmt(&corrected.2)
        ),
        results: json!({
            "naive_accept": {
                "counts": pserver_counts(&naive.1),
                "variance_ratio": ratio_json(&naive.2),
                "schedule_digest": format!("{:016x}", naive.1.schedule_digest),
            },
            "mh_corrected": {
                "counts": pserver_counts(&corrected.1),
                "variance_ratio": ratio_json(&corrected.2),
                "schedule_digest": format!("{:016x}", corrected.1.schedule_digest),
            },
            "identical_schedules": naive.1.diverged_at.is_none()
                && naive.1.schedule_digest == corrected.1.schedule_digest,
            "burn_in": s.burn_in,
            "thresholds": { "naive_min_ratio": NAIVE_INFLATION, "corrected_tolerance": CORRECTED_VARIANCE_TOL },
        }),
        metrics: csv_bytes(
            &["mode", "coordinate", "variance", "se", "truth", "ratio"],
            rows,
        )?,
        extra: Vec::new(),
    })
}

fn mode_name(m: ServerMode) -> &'static str {
    match m {
        ServerMode::MhCorrected => "mh_corrected",
        ServerMode::NaiveAccept => "naive_accept",
    }
}

fn run_audit(s: &AuditSpec) -> Result<Report> {
    let mut rows = Vec::new();
    let mut mismatched = Vec::new();
    for name in &s.configs {
        let cfg = find_canned(name)
            .ok_or_else(|| Error::config("experiment.configs", format!("unknown `{name}`")))?;
        let a = run(&cfg)?;
        let b = run(&cfg)?;
        let same = a.artifacts == b.artifacts;
        if !same {
            mismatched.push(name.clone());
        }
        let bytes: usize = a.artifacts.iter().map(|x| x.bytes.len()).sum();
        rows.push(vec![
            name.clone(),
            same.to_string(),
            a.artifacts.len().to_string(),
            bytes.to_string(),
        ]);
    }
    Ok(Report {
        passed: mismatched.is_empty(),
        headline: format!(
            "{} configs run twice, {} differ",
            s.configs.len(),
            mismatched.len()
        ),
        results: json!({ "configs": s.configs, "mismatched": mismatched }),
        metrics: csv_bytes(&["config", "identical", "artifacts", "bytes"], rows)?,
        extra: Vec::new(),
    })
}

fn run_torn(s: &TornSpec, seed: u64) -> Result<Report> {
    let r = torn_state_stress(s.threads, s.operations, seed)?;
    let passed =
        r.checksum_failures == 0 && r.version_regressions == 0 && r.operations >= s.operations;
    Ok(Report {
        passed,
        headline: format!(
            "{} operations on {} threads, {} checksum failures",
            r.operations, r.threads, r.checksum_failures
        ),
        results: serde_json::to_value(&r)?,
        metrics: csv_bytes(
            &[
                "threads",
                "operations",
                "reads",
                "writes",
                "checksum_failures",
                "version_regressions",
            ],
            [[
                r.threads as u64,
                r.operations,
                r.reads,
                r.writes,
                r.checksum_failures,
                r.version_regressions,
            ]
            .map(|v| v.to_string())],
        )?,
        extra: Vec::new(),
    })
}

fn three_state() -> TargetSpec {
    TargetSpec::Finite {
        weights: vec![0.2, 0.3, 0.5],
        site_sizes: None,
    }
}

fn uniform_mh() -> KernelConfig {
    KernelConfig::MetropolisHastings {
        proposal: Proposal::UniformIndependent,
    }
}

fn canned_config(
    name: &str,
    criterion: &str,
    description: &str,
    seed: u64,
    experiment: Experiment,
) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        criterion: criterion.into(),
        smoke: false,
        description: description.into(),
        seed,
        output_dir: None,
        experiment,
    }
}

/// The canned catalog. Each acceptance criterion has exactly one full
/// config; smoke configs are reduced companions.
pub fn canned() -> Vec<ExperimentConfig> {
    use crate::pserver::DelayKind;
    let mut smoke = canned_config(
        "theorem4_smoke",
        "AC1",
        "3-state MH kernel, m=3, b=4, N=500: exact measure propagation reaches d_N <= 1e-8 with no proof-step violations",
        11,
        Experiment::MeasureSim(MeasureSimSpec {
            target: three_state(),
            kernel: uniform_mh(),
            workers: 3,
            staleness_bound: 4,
            horizon: 500,
            initial: InitialSpec::PointMass { index: 0 },
        }),
    );
    smoke.smoke = true;
    let mut replay_smoke = canned_config(
        "shmem_replay_smoke",
        "AC4",
        "deterministic replay of a random bounded-staleness schedule on the 3-state target, 1e5 writes",
        5,
        Experiment::ShmemReplay(ShmemReplaySpec {
            target: three_state(),
            kernel: KernelConfig::MetropolisHastings {
                proposal: Proposal::NeighborWalk,
            },
            workers: 4,
            staleness_bound: 8,
            horizon: 100_000,
            burn_in: DEFAULT_BURN_IN,
        }),
    );
    replay_smoke.smoke = true;

    vec![
        smoke,
        canned_config(
            "theorem4_replication",
            "AC1",
            "1000 random (kernel, mu_0, schedule) triples with n<=6, m<=5, b<=10, N=300: zero proof-step violations and d_N <= 1e-8",
            1,
            Experiment::MeasureCampaign(CampaignSpec {
                trials: 1000,
                max_states: 6,
                max_workers: 5,
                max_bound: 10,
                horizon: 300,
            }),
        ),
        canned_config(
            "contraction_campaign",
            "AC2",
            "1000 random sparse ergodic kernels and distributions: one step never increases TV to the stationary law",
            2,
            Experiment::ContractionCampaign(ContractionSpec {
                trials: 1000,
                max_states: 6,
            }),
        ),
        canned_config(
            "frozen_worker_counterexample",
            "AC3",
            "2-state kernel, a worker that keeps rewriting from the initial value: d_k stays above d_1/2 through N=1000",
            3,
            Experiment::Counterexample(CounterexampleSpec {
                matrix: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                initial_state: 0,
                horizon: 1000,
            }),
        ),
        canned_config(
            "shmem_three_state",
            "AC4",
            "4 threads racing on one shared cell, 3-state MH target, 1e5 writes: late-window TV <= 0.02",
            4,
            Experiment::ShmemReal(ShmemRealSpec {
                target: three_state(),
                kernel: KernelConfig::MetropolisHastings {
                    proposal: Proposal::NeighborWalk,
                },
                workers: 4,
                horizon: 100_000,
                watchdog: 64,
                pacing: Pacing::YieldAfterWrite,
                burn_in: DEFAULT_BURN_IN,
            }),
        ),
        replay_smoke,
        canned_config(
            "pserver_zero_delay",
            "AC5",
            "parameter server with instantaneous communication on the 3-state target: detailed balance of the rendered kernel and TV <= 0.02 over 1e6 messages",
            6,
            Experiment::Pserver(PserverSpec {
                target: three_state(),
                kernel: uniform_mh(),
                workers: 1,
                horizon: 1_000_000,
                delay: DelayModel::instantaneous(),
                correction: ServerMode::MhCorrected,
                replicas: 1,
                thin: 1,
                burn_in: DEFAULT_BURN_IN,
                record_trace: true,
            }),
        ),
        canned_config(
            "pserver_gaussian",
            "AC6",
            "server-corrected stale Gibbs proposals on a correlation-0.5 bivariate Gaussian, m=4, reordering delays, 1e6 messages: moments within tolerance and 3 SE",
            7,
            Experiment::Pserver(PserverSpec {
                target: TargetSpec::BivariateGaussian { rho: 0.5 },
                kernel: KernelConfig::Gibbs,
                workers: 4,
                horizon: 1_000_000,
                delay: DelayModel {
                    kind: DelayKind::ReorderRandom { mean_latency: 2.0 },
                    staleness_cap: 16,
                },
                correction: ServerMode::MhCorrected,
                replicas: 1,
                thin: 1,
                burn_in: DEFAULT_BURN_IN,
                record_trace: false,
            }),
        ),
        canned_config(
            "naive_divergence_control",
            "AC7",
            "paired naive vs corrected runs with the same seed on a correlation-0.999 Gaussian, stale Gibbs proposals: naive variance >= 1.5x truth, corrected within 10%",
            8,
            Experiment::PserverPaired(PairedSpec {
                target: TargetSpec::BivariateGaussian { rho: 0.999 },
                kernel: KernelConfig::Gibbs,
                workers: 4,
                horizon: 30_000_000,
                delay: DelayModel {
                    kind: DelayKind::ReorderRandom { mean_latency: 8.0 },
                    staleness_cap: 32,
                },
                thin: 100,
                burn_in: DEFAULT_BURN_IN,
            }),
        ),
        canned_config(
            "pserver_coupled",
            "AC8",
            "two server-side replicas of the 3-state target, two workers each, 1e6 messages: every replica marginal within TV 0.02",
            9,
            Experiment::Pserver(PserverSpec {
                target: three_state(),
                kernel: uniform_mh(),
                workers: 4,
                horizon: 1_000_000,
                delay: DelayModel {
                    kind: DelayKind::FifoRandom { mean_latency: 2.0 },
                    staleness_cap: 8,
                },
                correction: ServerMode::MhCorrected,
                replicas: 2,
                thin: 1,
                burn_in: DEFAULT_BURN_IN,
                record_trace: false,
            }),
        ),
        canned_config(
            "determinism_audit",
            "AC9",
            "runs every deterministic canned config twice and compares all artifacts byte for byte",
            10,
            Experiment::DeterminismAudit(AuditSpec {
                configs: DETERMINISTIC_CANNED.iter().map(|s| s.to_string()).collect(),
            }),
        ),
        canned_config(
            "torn_state_stress",
            "AC10",
            "1e6 concurrent reads and writes of checksummed states on one shared cell: zero checksum failures",
            12,
            Experiment::TornState(TornSpec {
                threads: 4,
                operations: 1_000_000,
            }),
        ),
    ]
}

const DETERMINISTIC_CANNED: &[&str] = &[
    "theorem4_smoke",
    "theorem4_replication",
    "contraction_campaign",
    "frozen_worker_counterexample",
    "shmem_replay_smoke",
    "pserver_zero_delay",
    "pserver_gaussian",
    "naive_divergence_control",
    "pserver_coupled",
];

pub fn find_canned(name: &str) -> Option<ExperimentConfig> {
    canned().into_iter().find(|c| c.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_shape() {
        let all = canned();
        assert!(all.len() >= 6);
        for name in [
            "theorem4_smoke",
            "pserver_gaussian",
            "naive_divergence_control",
        ] {
            assert!(all.iter().any(|c| c.name == name), "{name}");
        }
        for i in 1..=10 {
            let id = format!("AC{i}");
            let full = all.iter().filter(|c| c.criterion == id && !c.smoke).count();
            assert_eq!(full, 1, "{id}");
        }
        for c in &all {
            c.validate().unwrap();
        }
        for name in DETERMINISTIC_CANNED {
            assert!(find_canned(name).unwrap().experiment.is_deterministic());
        }
        let deterministic = all
            .iter()
            .filter(|c| c.experiment.is_deterministic())
            .count();
        // every deterministic config except the audit itself is audited
        assert_eq!(deterministic, DETERMINISTIC_CANNED.len() + 1);
    }

    #[test]
    fn config_round_trip() {
        for c in canned() {
            let text = c.to_json();
            let back = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn malformed_config_reports_field_path() {
        let text = r#"{"name":"x","criterion":"AC1","seed":1,
            "experiment":{"mode":"measure_sim","target":{"kind":"finite","weights":[1,2]},
            "kernel":{"kind":"gibbs"},"workers":"three","staleness_bound":4,"horizon":10}}"#;
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "experiment.workers"),
            other => panic!("{other:?}"),
        }
        let missing_seed = r#"{"name":"x","criterion":"AC1","experiment":{"mode":"torn_state","threads":1,"operations":1}}"#;
        assert!(matches!(
            ExperimentConfig::from_json(missing_seed),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn infeasible_replay_is_a_config_error() {
        let mut c = find_canned("shmem_replay_smoke").unwrap();
        if let Experiment::ShmemReplay(s) = &mut c.experiment {
            s.staleness_bound = 2;
        }
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "experiment.staleness_bound"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn smoke_run_passes_and_is_deterministic() {
        let c = find_canned("theorem4_smoke").unwrap();
        let a = run(&c).unwrap();
        assert!(a.passed, "{}", a.headline);
        assert!(a.summary["results"]["final_distance"].as_f64().unwrap() <= 1e-8);
        let b = run(&c).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        let names: Vec<_> = a.artifacts.iter().map(|x| x.file_name.as_str()).collect();
        assert_eq!(names, ["summary.json", "metrics.csv", "trace.jsonl"]);
    }

    #[test]
    fn minorized_kernels_are_ergodic_and_contract() {
        let mut rng = stream(0, 0);
        for _ in 0..200 {
            let n = rng.random_range(2..=6);
            let k = random_minorized_kernel(n, &mut rng).unwrap();
            assert!(k.is_ergodic());
            // Dobrushin coefficient at most one half
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = (0..n)
                        .map(|c| (k.get(i, c) - k.get(j, c)).abs())
                        .sum::<f64>()
                        / 2.0;
                    assert!(d <= 0.5 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn counterexample_config_does_not_converge() {
        let c = find_canned("frozen_worker_counterexample").unwrap();
        let o = run(&c).unwrap();
        assert!(o.passed, "{}", o.headline);
    }

    #[test]
    fn audit_rejects_nondeterministic_entries() {
        let mut c = find_canned("determinism_audit").unwrap();
        c.experiment = Experiment::DeterminismAudit(AuditSpec {
            configs: vec!["torn_state_stress".into()],
        });
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }
}
