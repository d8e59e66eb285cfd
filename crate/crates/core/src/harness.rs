//! Experiment configuration, γ cross-validation, sweeps and CSV output.
//!
//! Every trial draws from a stream addressed by
//! `(seed, cell key, purpose, trial index)`, so results do not depend on the
//! order in which cells or trials are executed.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, param, Error, Result};
use crate::metrics::{classify, confusion, rrmse, sensitivity, specificity};
use crate::numerics::{label, DenseMatrix, DenseVector, RngStream};
use crate::pooling::{generate_pooling_matrix, validate_pooling, PoolingMatrix, PoolingReport, SurrogateSystem};
use crate::simulate::{generate_signal, measure, GroundTruth, NoiseModel, NoiseParams, SignalSpec};
use crate::solver::{solve, LassoProblem, SolverConfig};
use crate::weights::{gradient_at_truth, WeightContext, WeightParams, WeightSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Lasso,
    Wlasso,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Lasso => "lasso",
            Estimator::Wlasso => "wlasso",
        }
    }
}

/// `count` geometric points from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let ratio = (hi / lo).ln() / (count - 1) as f64;
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo * (ratio * i as f64).exp() })
                .collect()
        }
    }
}

pub fn default_gamma_grid() -> Vec<f64> {
    geometric_grid(2.01, 64.0, 12)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p: usize,
    pub n_list: Vec<usize>,
    pub f_s_list: Vec<f64>,
    pub q_list: Vec<f64>,
    pub sigma: f64,
    /// Replaces `sigma` with a list of noise levels when present.
    pub sigma_list: Option<Vec<f64>>,
    pub q_a: f64,
    pub trials: usize,
    pub cv_runs: usize,
    pub gamma_grid: Vec<f64>,
    pub estimators: Vec<Estimator>,
    pub threshold: f64,
    pub noise_model: NoiseModel,
    pub seed: u64,
    pub force_assumptions: bool,
    /// Constant on the `Λ̂` term of both weight kinds.
    pub c_const: f64,
    /// Weight confidence level; `3 ln p` when absent.
    pub theta: Option<f64>,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            p: 1000,
            n_list: vec![150, 200, 300, 375, 500],
            f_s_list: vec![0.02, 0.04, 0.08, 0.15],
            q_list: vec![0.05, 0.1, 0.25, 0.5, 0.75],
            sigma: 0.05,
            sigma_list: None,
            q_a: 0.95,
            trials: 200,
            cv_runs: 5,
            gamma_grid: default_gamma_grid(),
            estimators: vec![Estimator::Lasso, Estimator::Wlasso],
            threshold: 0.2,
            noise_model: NoiseModel::Exact,
            seed: 0,
            force_assumptions: false,
            c_const: crate::weights::C_PROVABLE,
            theta: None,
            solver: SolverConfig::default(),
        }
    }
}

/// Named starting points for a configuration file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }

    pub fn config(&self) -> ExperimentConfig {
        match self {
            Preset::Paper => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
        }
    }
}

/// Weight constant used by the desk preset.
pub const DESK_C_CONST: f64 = 0.0;

impl ExperimentConfig {
    /// Reduced grid (`p = 400`, 30 trials) that finishes in minutes.
    pub fn desk() -> Self {
        ExperimentConfig {
            p: 400,
            n_list: vec![80, 120, 160, 200],
            f_s_list: vec![0.02, 0.04, 0.08],
            q_list: vec![0.1, 0.5],
            trials: 30,
            c_const: DESK_C_CONST,
            force_assumptions: true,
            ..ExperimentConfig::default()
        }
    }

    /// Parses a JSON object, taking unspecified fields from `base`.
    /// Unknown keys are rejected.
    pub fn from_json_str(text: &str, base: &ExperimentConfig) -> Result<Self> {
        let overrides: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(over) = overrides else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
        let target = merged.as_object_mut().expect("config serialises to an object");
        for (key, value) in over {
            match (target.get_mut(&key), value) {
                (Some(Value::Object(inner)), Value::Object(patch)) => {
                    for (k, v) in patch {
                        inner.insert(k, v);
                    }
                }
                (_, value) => {
                    target.insert(key, value);
                }
            }
        }
        let config: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, base: &ExperimentConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_list.clone().unwrap_or_else(|| vec![self.sigma])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p < 2 {
            return fail(format!("p = {} must be at least 2", self.p));
        }
        if self.n_list.is_empty() || self.f_s_list.is_empty() || self.q_list.is_empty() {
            return fail("n_list, f_s_list and q_list must be nonempty".into());
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < 2 || n >= self.p) {
            return fail(format!("n = {n} must satisfy 2 <= n < p = {}", self.p));
        }
        if let Some(q) = self.q_list.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return fail(format!("q = {q} must lie in (0, 1)"));
        }
        if let Some(f) = self.f_s_list.iter().find(|f| !(**f >= 0.0 && **f < 1.0)) {
            return fail(format!("f_s = {f} must lie in [0, 1)"));
        }
        if matches!(&self.sigma_list, Some(l) if l.is_empty()) {
            return fail("sigma_list must be nonempty when given".into());
        }
        for s in self.sigmas() {
            NoiseParams::new(s, self.q_a).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.gamma_grid.is_empty() {
            return fail("gamma_grid must be nonempty".into());
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(**g > 2.0 && g.is_finite())) {
            return fail(format!("gamma = {g} must be a finite value above 2"));
        }
        if self.cv_runs == 0 {
            return fail("cv_runs must be at least 1".into());
        }
        if self.estimators.iter().collect::<BTreeSet<_>>().len() != self.estimators.len() {
            return fail("estimators must not repeat".into());
        }
        if !(self.threshold >= 0.0) {
            return fail(format!("threshold = {} must be nonnegative", self.threshold));
        }
        if !(self.c_const >= 0.0 && self.c_const.is_finite()) {
            return fail(format!("c_const = {} must be finite and nonnegative", self.c_const));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("theta = {t} must be finite and positive"));
            }
        }
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Cells in sweep order: σ, then q, then n, then f_s.
    pub fn cells(&self) -> Vec<CellConfig> {
        let mut out = Vec::new();
        for sigma in self.sigmas() {
            for &q in &self.q_list {
                for &n in &self.n_list {
                    for &f_s in &self.f_s_list {
                        out.push(CellConfig { n, p: self.p, q, f_s, sigma, q_a: self.q_a });
                    }
                }
            }
        }
        out
    }

    pub fn weight_params(&self, cell: &CellConfig) -> Result<WeightParams> {
        let noise = NoiseParams::new(cell.sigma, cell.q_a)?;
        let mut wp = WeightParams::new(cell.n, cell.p, cell.q, noise)
            .with_c(self.c_const)
            .forced(self.force_assumptions);
        if let Some(t) = self.theta {
            wp = wp.with_theta(t);
        }
        Ok(wp)
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub n: usize,
    pub p: usize,
    pub q: f64,
    pub f_s: f64,
    pub sigma: f64,
    pub q_a: f64,
}

impl CellConfig {
    /// Stable stream key derived from the cell's parameters.
    pub fn key(&self) -> u64 {
        label(&format!(
            "n={};p={};q={:?};fs={:?};sigma={:?};qa={:?}",
            self.n, self.p, self.q, self.f_s, self.sigma, self.q_a
        ))
    }

    pub fn describe(&self) -> String {
        format!(
            "n={} p={} q={} f_s={} sigma={} q_a={}",
            self.n, self.p, self.q, self.f_s, self.sigma, self.q_a
        )
    }
}

/// Stream family a trial draws from; cross-validation runs never share
/// streams with the reported trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    CrossValidation,
    Main,
    Validation,
}

impl Purpose {
    fn tag(&self) -> u64 {
        match self {
            Purpose::CrossValidation => label("cv"),
            Purpose::Main => label("main"),
            Purpose::Validation => label("validate"),
        }
    }
}

pub fn trial_stream(seed: u64, cell: &CellConfig, purpose: Purpose, index: usize) -> RngStream {
    RngStream::new(seed, &[cell.key(), purpose.tag(), index as u64])
}

/// A simulated pooling experiment and its surrogate system.
#[derive(Clone, Debug)]
pub struct TrialInstance {
    pub truth: GroundTruth,
    pub a: PoolingMatrix,
    pub y: DenseVector,
    pub system: SurrogateSystem,
    pub pooling: PoolingReport,
}

/// Draws `A`, `x*` (multiplied by `scale`) and `y` for one trial. Separate
/// child streams feed the design, the signal and the noise, so a different
/// `scale` reuses the same design and noise draws.
pub fn simulate_instance(
    config: &ExperimentConfig,
    cell: &CellConfig,
    purpose: Purpose,
    index: usize,
    scale: f64,
) -> Result<TrialInstance> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(param(format!("signal scale {scale} must be positive")));
    }
    let root = trial_stream(config.seed, cell, purpose, index);
    let a = generate_pooling_matrix(cell.n, cell.p, cell.q, &mut root.derive(label("pooling")))?;
    let mut truth = generate_signal(&SignalSpec::new(cell.p, cell.f_s), &mut root.derive(label("signal")))?;
    if scale != 1.0 {
        truth = truth.scaled(scale);
    }
    let noise = NoiseParams::new(cell.sigma, cell.q_a)?;
    let y = measure(config.noise_model, &a, &truth.x_star, &noise, &mut root.derive(label("noise")))?;
    let system = SurrogateSystem::build(&a, &y)?;
    let pooling = validate_pooling(&a);
    Ok(TrialInstance { truth, a, y, system, pooling })
}

/// One CSV row: a single (trial, estimator) result.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub n: usize,
    pub p: usize,
    pub q: f64,
    pub f_s: f64,
    pub sigma: f64,
    pub q_a: f64,
    pub estimator: Estimator,
    pub gamma: f64,
    pub rrmse: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub l1_norm_true: f64,
    pub c1_violated: bool,
    pub pooling_warnings: usize,
    pub solver_iterations: usize,
    pub converged: bool,
    pub noise_model: NoiseModel,
}

pub const TRIAL_CSV_HEADER: [&str; 19] = [
    "trial_index",
    "n",
    "p",
    "q",
    "f_s",
    "sigma",
    "q_a",
    "estimator",
    "gamma",
    "rrmse",
    "sensitivity",
    "specificity",
    "lambda_hat",
    "l1_norm_true",
    "c1_violated",
    "pooling_warnings",
    "solver_iterations",
    "converged",
    "noise_model",
];

/// Shortest round-trip decimal, `NA` for missing or non-finite values.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_float)
}

impl TrialRecord {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.trial_index.to_string(),
            self.n.to_string(),
            self.p.to_string(),
            fmt_float(self.q),
            fmt_float(self.f_s),
            fmt_float(self.sigma),
            fmt_float(self.q_a),
            self.estimator.as_str().to_string(),
            fmt_float(self.gamma),
            fmt_float(self.rrmse),
            fmt_opt(self.sensitivity),
            fmt_opt(self.specificity),
            fmt_opt(self.lambda_hat),
            fmt_float(self.l1_norm_true),
            self.c1_violated.to_string(),
            self.pooling_warnings.to_string(),
            self.solver_iterations.to_string(),
            self.converged.to_string(),
            self.noise_model.as_str().to_string(),
        ]
    }
}

/// Result of one (trial, estimator) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum TrialOutcome {
    Completed(TrialRecord),
    Skipped { estimator: Estimator, reason: String },
}

impl TrialOutcome {
    pub fn record(&self) -> Option<&TrialRecord> {
        match self {
            TrialOutcome::Completed(r) => Some(r),
            TrialOutcome::Skipped { .. } => None,
        }
    }

    pub fn estimator(&self) -> Estimator {
        match self {
            TrialOutcome::Completed(r) => r.estimator,
            TrialOutcome::Skipped { estimator, .. } => *estimator,
        }
    }
}

/// Per-estimator weights of one instance, or why they are unavailable.
struct PreparedWeights {
    lambda_hat: Option<f64>,
    sets: Vec<(Estimator, std::result::Result<WeightSet, String>)>,
}

fn prepare_weights(
    config: &ExperimentConfig,
    cell: &CellConfig,
    inst: &TrialInstance,
    estimators: &[Estimator],
) -> Result<PreparedWeights> {
    let wp = config.weight_params(cell)?;
    let ctx = match WeightContext::new(&inst.a, &inst.y, &wp) {
        Ok(ctx) => ctx,
        Err(Error::Assumption { name, detail }) => {
            let reason = format!("assumption {name} failed: {detail}");
            return Ok(PreparedWeights {
                lambda_hat: None,
                sets: estimators.iter().map(|&e| (e, Err(reason.clone()))).collect(),
            });
        }
        Err(e) => return Err(e),
    };
    let mut sets = Vec::with_capacity(estimators.len());
    for &e in estimators {
        let ws = match e {
            Estimator::Lasso => ctx.lasso(),
            Estimator::Wlasso => ctx.wlasso(),
        };
        sets.push((
            e,
            match ws {
                Ok(ws) => Ok(ws),
                Err(Error::Assumption { name, detail }) => Err(format!("assumption {name} failed: {detail}")),
                Err(other) => return Err(other),
            },
        ));
    }
    Ok(PreparedWeights { lambda_hat: ctx.lambda_hat(), sets })
}

/// Solves every requested `(estimator, γ)` pair on one simulated instance.
/// The outer vector follows `requests`; the inner one follows each γ list.
pub fn evaluate_instance(
    config: &ExperimentConfig,
    cell: &CellConfig,
    purpose: Purpose,
    index: usize,
    scale: f64,
    requests: &[(Estimator, Vec<f64>)],
) -> Result<Vec<std::result::Result<Vec<TrialRecord>, String>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let inst = simulate_instance(config, cell, purpose, index, scale)?;
    let estimators: Vec<Estimator> = requests.iter().map(|(e, _)| *e).collect();
    let prepared = prepare_weights(config, cell, &inst, &estimators)?;
    let sys = &inst.system;
    let gram: DenseMatrix = sys.a_tilde.t().dot(&sys.a_tilde);
    let grad = gradient_at_truth(&sys.a_tilde, &sys.y_tilde, &inst.truth.x_star);
    let truth_labels = classify(&inst.truth.x_star, config.threshold);
    let l1 = inst.truth.l1_norm();

    let mut out = Vec::with_capacity(requests.len());
    for ((estimator, gammas), (_, ws)) in requests.iter().zip(prepared.sets) {
        let ws = match ws {
            Ok(ws) => ws,
            Err(reason) => {
                out.push(Err(reason));
                continue;
            }
        };
        let beta = ws.expand(cell.p);
        let c1_violated = grad.iter().zip(beta.iter()).any(|(g, b)| g.abs() > *b);
        let mut records = Vec::with_capacity(gammas.len());
        for &gamma in gammas {
            let problem = LassoProblem::with_penalties(&sys.a_tilde, &sys.y_tilde, beta.clone(), gamma)?
                .with_gram(&gram)?;
            let result = solve(&problem, &config.solver)?;
            let err = rrmse(&inst.truth.x_star, &result.x_hat)?;
            let conf = confusion(&truth_labels, &classify(&result.x_hat, config.threshold))?;
            records.push(TrialRecord {
                trial_index: index,
                n: cell.n,
                p: cell.p,
                q: cell.q,
                f_s: cell.f_s,
                sigma: cell.sigma,
                q_a: cell.q_a,
                estimator: *estimator,
                gamma,
                rrmse: err,
                sensitivity: sensitivity(&conf),
                specificity: specificity(&conf),
                lambda_hat: prepared.lambda_hat,
                l1_norm_true: l1,
                c1_violated,
                pooling_warnings: inst.pooling.warning_count(),
                solver_iterations: result.iterations,
                converged: result.converged,
                noise_model: config.noise_model,
            });
        }
        out.push(Ok(records));
    }
    Ok(out)
}

/// Runs main trial `trial_index` of `cell` with one γ per estimator.
pub fn run_trial(
    config: &ExperimentConfig,
    cell: &CellConfig,
    trial_index: usize,
    gammas: &[(Estimator, f64)],
) -> Result<Vec<TrialOutcome>> {
    run_trial_scaled(config, cell, trial_index, gammas, 1.0)
}

/// As [`run_trial`] with the ground truth multiplied by `scale` on the same
/// design and noise draws.
pub fn run_trial_scaled(
    config: &ExperimentConfig,
    cell: &CellConfig,
    trial_index: usize,
    gammas: &[(Estimator, f64)],
    scale: f64,
) -> Result<Vec<TrialOutcome>> {
    let requests: Vec<(Estimator, Vec<f64>)> = gammas.iter().map(|&(e, g)| (e, vec![g])).collect();
    let results = evaluate_instance(config, cell, Purpose::Main, trial_index, scale, &requests)?;
    Ok(results
        .into_iter()
        .zip(gammas)
        .map(|(r, &(estimator, _))| match r {
            Ok(mut recs) => TrialOutcome::Completed(recs.remove(0)),
            Err(reason) => TrialOutcome::Skipped { estimator, reason },
        })
        .collect())
}

/// Cross-validated γ for one estimator in one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaChoice {
    pub estimator: Estimator,
    pub gamma: f64,
    /// Mean preliminary RRMSE at the chosen γ; `None` for a one-point grid.
    pub mean_rrmse: Option<f64>,
    /// `(γ, mean preliminary RRMSE)` over the grid.
    pub grid: Vec<(f64, f64)>,
    pub completed_runs: usize,
}

/// Cross-validation outcome per estimator; an estimator whose preliminary
/// runs were all skipped carries the skip reason.
pub type CvResult = Vec<(Estimator, std::result::Result<GammaChoice, String>)>;

/// Picks, per estimator, the grid γ with the lowest mean RRMSE over
/// `cv_runs` preliminary trials (ties go to the smaller γ). Fails with a
/// configuration error when no estimator completed a preliminary trial.
pub fn cross_validate_gamma(config: &ExperimentConfig, cell: &CellConfig) -> Result<CvResult> {
    if config.estimators.is_empty() {
        return Ok(Vec::new());
    }
    let mut grid = config.gamma_grid.clone();
    grid.sort_by(|a, b| a.total_cmp(b));
    if grid.len() == 1 {
        return Ok(config
            .estimators
            .iter()
            .map(|&estimator| {
                (
                    estimator,
                    Ok(GammaChoice { estimator, gamma: grid[0], mean_rrmse: None, grid: Vec::new(), completed_runs: 0 }),
                )
            })
            .collect());
    }
    let requests: Vec<(Estimator, Vec<f64>)> = config.estimators.iter().map(|&e| (e, grid.clone())).collect();
    let runs: Vec<_> = (0..config.cv_runs)
        .into_par_iter()
        .map(|r| evaluate_instance(config, cell, Purpose::CrossValidation, r, 1.0, &requests))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(requests.len());
    for (i, &estimator) in config.estimators.iter().enumerate() {
        let mut sums = vec![0.0; grid.len()];
        let mut completed = 0usize;
        let mut reason = None;
        for run in &runs {
            match &run[i] {
                Ok(records) => {
                    completed += 1;
                    for (s, rec) in sums.iter_mut().zip(records) {
                        *s += rec.rrmse;
                    }
                }
                Err(r) => reason = reason.or_else(|| Some(r.clone())),
            }
        }
        if completed == 0 {
            out.push((estimator, Err(reason.unwrap_or_else(|| "no preliminary runs".into()))));
            continue;
        }
        let means: Vec<f64> = sums.iter().map(|s| s / completed as f64).collect();
        let mut best = 0;
        for (j, m) in means.iter().enumerate() {
            if *m < means[best] {
                best = j;
            }
        }
        out.push((
            estimator,
            Ok(GammaChoice {
                estimator,
                gamma: grid[best],
                mean_rrmse: Some(means[best]),
                grid: grid.iter().copied().zip(means).collect(),
                completed_runs: completed,
            }),
        ));
    }
    if out.iter().all(|(_, c)| c.is_err()) {
        let reasons: Vec<String> = out.iter().filter_map(|(_, c)| c.clone().err()).collect();
        return Err(Error::Config(format!(
            "all preliminary trials skipped in cell {}: {}",
            cell.describe(),
            reasons.join("; ")
        )));
    }
    Ok(out)
}

/// Mean and sample standard deviation of the available values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stat {
        let v: Vec<f64> = values.into_iter().collect();
        let count = v.len();
        if count == 0 {
            return Stat::default();
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let std = (count > 1)
            .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt());
        Stat { count, mean: Some(mean), std }
    }
}

/// Aggregated results of one (cell, estimator) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: CellConfig,
    pub estimator: Estimator,
    pub gamma: Option<f64>,
    pub cv_mean_rrmse: Option<f64>,
    pub trials: usize,
    pub skipped: usize,
    /// First skip reason, or why the whole cell failed.
    pub note: Option<String>,
    pub rrmse: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
    pub lambda_hat: Stat,
    pub l1_norm_true: Stat,
    pub c1_violation_rate: Option<f64>,
    pub converged_rate: Option<f64>,
}

impl CellSummary {
    fn empty(cell: CellConfig, estimator: Estimator, note: String) -> Self {
        CellSummary {
            cell,
            estimator,
            gamma: None,
            cv_mean_rrmse: None,
            trials: 0,
            skipped: 0,
            note: Some(note),
            rrmse: Stat::default(),
            sensitivity: Stat::default(),
            specificity: Stat::default(),
            lambda_hat: Stat::default(),
            l1_norm_true: Stat::default(),
            c1_violation_rate: None,
            converged_rate: None,
        }
    }

    fn from_outcomes(cell: CellConfig, choice: &GammaChoice, outcomes: &[&TrialOutcome]) -> Self {
        let recs: Vec<&TrialRecord> = outcomes.iter().filter_map(|o| o.record()).collect();
        let skipped = outcomes.len() - recs.len();
        let note = outcomes.iter().find_map(|o| match o {
            TrialOutcome::Skipped { reason, .. } => Some(reason.clone()),
            TrialOutcome::Completed(_) => None,
        });
        let rate = |f: fn(&TrialRecord) -> bool| {
            (!recs.is_empty()).then(|| recs.iter().filter(|r| f(r)).count() as f64 / recs.len() as f64)
        };
        CellSummary {
            cell,
            estimator: choice.estimator,
            gamma: Some(choice.gamma),
            cv_mean_rrmse: choice.mean_rrmse,
            trials: recs.len(),
            skipped,
            note,
            rrmse: Stat::of(recs.iter().map(|r| r.rrmse)),
            sensitivity: Stat::of(recs.iter().filter_map(|r| r.sensitivity)),
            specificity: Stat::of(recs.iter().filter_map(|r| r.specificity)),
            lambda_hat: Stat::of(recs.iter().filter_map(|r| r.lambda_hat)),
            l1_norm_true: Stat::of(recs.iter().map(|r| r.l1_norm_true)),
            c1_violation_rate: rate(|r| r.c1_violated),
            converged_rate: rate(|r| r.converged),
        }
    }
}

pub const AGGREGATE_CSV_HEADER: [&str; 25] = [
    "n",
    "p",
    "q",
    "f_s",
    "sigma",
    "q_a",
    "estimator",
    "gamma",
    "cv_mean_rrmse",
    "trials",
    "skipped",
    "rrmse_mean",
    "rrmse_std",
    "sensitivity_mean",
    "sensitivity_std",
    "specificity_mean",
    "specificity_std",
    "lambda_hat_mean",
    "lambda_hat_std",
    "l1_norm_true_mean",
    "l1_norm_true_std",
    "c1_violation_rate",
    "converged_rate",
    "sensitivity_count",
    "note",
];

impl CellSummary {
    pub fn csv_fields(&self) -> Vec<String> {
        let c = &self.cell;
        vec![
            c.n.to_string(),
            c.p.to_string(),
            fmt_float(c.q),
            fmt_float(c.f_s),
            fmt_float(c.sigma),
            fmt_float(c.q_a),
            self.estimator.as_str().to_string(),
            fmt_opt(self.gamma),
            fmt_opt(self.cv_mean_rrmse),
            self.trials.to_string(),
            self.skipped.to_string(),
            fmt_opt(self.rrmse.mean),
            fmt_opt(self.rrmse.std),
            fmt_opt(self.sensitivity.mean),
            fmt_opt(self.sensitivity.std),
            fmt_opt(self.specificity.mean),
            fmt_opt(self.specificity.std),
            fmt_opt(self.lambda_hat.mean),
            fmt_opt(self.lambda_hat.std),
            fmt_opt(self.l1_norm_true.mean),
            fmt_opt(self.l1_norm_true.std),
            fmt_opt(self.c1_violation_rate),
            fmt_opt(self.converged_rate),
            self.sensitivity.count.to_string(),
            self.note.clone().unwrap_or_default(),
        ]
    }
}

/// Everything a sweep produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    /// Per-trial rows in (cell, trial, estimator) order.
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
}

impl SweepTable {
    pub fn summary(&self, cell: &CellConfig, estimator: Estimator) -> Option<&CellSummary> {
        self.cells.iter().find(|s| s.cell == *cell && s.estimator == estimator)
    }

    pub fn summary_at(&self, sigma: f64, q: f64, n: usize, f_s: f64, estimator: Estimator) -> Option<&CellSummary> {
        self.cells.iter().find(|s| {
            s.cell.sigma == sigma && s.cell.q == q && s.cell.n == n && s.cell.f_s == f_s && s.estimator == estimator
        })
    }
}

/// Runs one cell: cross-validation, then `config.trials` main trials.
pub fn run_cell(config: &ExperimentConfig, cell: &CellConfig) -> Result<(Vec<TrialRecord>, Vec<CellSummary>)> {
    let cv = cross_validate_gamma(config, cell)?;
    let gammas: Vec<(Estimator, f64)> =
        cv.iter().filter_map(|(e, c)| c.as_ref().ok().map(|c| (*e, c.gamma))).collect();
    let trials: Vec<Vec<TrialOutcome>> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, cell, t, &gammas))
        .collect::<Result<Vec<_>>>()?;

    let records: Vec<TrialRecord> =
        trials.iter().flatten().filter_map(|o| o.record().cloned()).collect();
    let mut summaries = Vec::with_capacity(cv.len());
    for (estimator, choice) in &cv {
        match choice {
            Ok(choice) => {
                let outcomes: Vec<&TrialOutcome> =
                    trials.iter().flatten().filter(|o| o.estimator() == *estimator).collect();
                summaries.push(CellSummary::from_outcomes(*cell, choice, &outcomes));
            }
            Err(reason) => {
                let mut s = CellSummary::empty(*cell, *estimator, format!("cross-validation skipped: {reason}"));
                s.skipped = config.trials;
                summaries.push(s);
            }
        }
    }
    Ok((records, summaries))
}

/// Runs every cell of the grid. A failing cell is recorded in its summaries
/// and the sweep moves on.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepTable> {
    config.validate()?;
    let mut table = SweepTable::default();
    for cell in config.cells() {
        match run_cell(config, &cell) {
            Ok((records, summaries)) => {
                table.records.extend(records);
                table.cells.extend(summaries);
            }
            Err(e) => {
                for &est in &config.estimators {
                    table.cells.push(CellSummary::empty(cell, est, format!("cell failed: {e}")));
                }
            }
        }
    }
    Ok(table)
}

pub(crate) fn csv_string<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

pub fn records_to_csv(records: &[TrialRecord]) -> String {
    csv_string(&TRIAL_CSV_HEADER, records.iter().map(|r| r.csv_fields()))
}

pub fn summaries_to_csv(cells: &[CellSummary]) -> String {
    csv_string(&AGGREGATE_CSV_HEADER, cells.iter().map(|c| c.csv_fields()))
}

/// Writes the per-trial CSV.
pub fn emit_csv(records: &[TrialRecord], path: &Path) -> Result<()> {
    fs::write(path, records_to_csv(records)).map_err(io_err(path))
}

/// Writes the per-(cell, estimator) aggregate CSV.
pub fn emit_aggregate_csv(cells: &[CellSummary], path: &Path) -> Result<()> {
    fs::write(path, summaries_to_csv(cells)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            p: 120,
            n_list: vec![60],
            f_s_list: vec![0.05],
            q_list: vec![0.5],
            trials: 3,
            cv_runs: 2,
            gamma_grid: vec![2.5, 8.0],
            c_const: 0.0,
            seed: 17,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = default_gamma_grid();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 2.01);
        assert_eq!(g[11], 64.0);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig::desk().validate().is_ok());
        let bad = [
            ExperimentConfig { gamma_grid: vec![2.0], ..tiny() },
            ExperimentConfig { gamma_grid: vec![], ..tiny() },
            ExperimentConfig { n_list: vec![], ..tiny() },
            ExperimentConfig { n_list: vec![120], ..tiny() },
            ExperimentConfig { q_list: vec![1.0], ..tiny() },
            ExperimentConfig { cv_runs: 0, ..tiny() },
            ExperimentConfig { estimators: vec![Estimator::Lasso, Estimator::Lasso], ..tiny() },
            ExperimentConfig { sigma_list: Some(vec![]), ..tiny() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn json_overrides_and_unknown_keys() {
        let base = ExperimentConfig::desk();
        let cfg = ExperimentConfig::from_json_str(r#"{"trials": 4, "solver": {"tol_kkt": 1e-7}}"#, &base).unwrap();
        assert_eq!(cfg.trials, 4);
        assert_eq!(cfg.p, 400);
        assert_eq!(cfg.solver.tol_kkt, 1e-7);
        assert_eq!(cfg.solver.max_iter, 50_000);
        assert!(matches!(
            ExperimentConfig::from_json_str(r#"{"trails": 4}"#, &base),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_json_str(r#"{"solver": {"bogus": 1}}"#, &base).is_err());
        assert!(ExperimentConfig::from_json_str("[1]", &base).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"gamma_grid": [1.5]}"#, &base).is_err());
        let round = ExperimentConfig::from_json_str(&base.to_json(), &ExperimentConfig::default()).unwrap();
        assert_eq!(round, base);
    }

    #[test]
    fn cells_and_keys() {
        let cfg = ExperimentConfig { sigma_list: Some(vec![0.1, 0.2]), ..ExperimentConfig::desk() };
        let cells = cfg.cells();
        assert_eq!(cells.len(), 2 * 2 * 4 * 3);
        let keys: BTreeSet<u64> = cells.iter().map(|c| c.key()).collect();
        assert_eq!(keys.len(), cells.len());
    }

    #[test]
    fn trial_is_deterministic() {
        let cfg = tiny();
        let cell = cfg.cells()[0];
        let g = [(Estimator::Lasso, 3.0), (Estimator::Wlasso, 3.0)];
        let a = run_trial(&cfg, &cell, 1, &g).unwrap();
        let b = run_trial(&cfg, &cell, 1, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let c = run_trial(&cfg, &cell, 2, &g).unwrap();
        assert_ne!(a[0].record().unwrap().rrmse, c[0].record().unwrap().rrmse);
        assert!(run_trial(&cfg, &cell, 1, &[]).unwrap().is_empty());
    }

    #[test]
    fn noiseless_recovery_is_accurate() {
        let cfg = ExperimentConfig {
            p: 400,
            n_list: vec![200],
            f_s_list: vec![0.02],
            sigma: 0.0,
            c_const: 0.01,
            ..tiny()
        };
        let cell = cfg.cells()[0];
        for t in 0..3 {
            let out = run_trial(&cfg, &cell, t, &[(Estimator::Wlasso, 2.01)]).unwrap();
            let rec = out[0].record().unwrap();
            assert!(rec.rrmse <= 0.05, "rrmse {}", rec.rrmse);
            assert!(rec.converged);
        }
    }

    #[test]
    fn unforced_assumption_failure_skips() {
        let cfg = ExperimentConfig { c_const: 126.0, p: 400, n_list: vec![30], ..tiny() };
        let cell = cfg.cells()[0];
        let out = run_trial(&cfg, &cell, 0, &[(Estimator::Lasso, 3.0)]).unwrap();
        match &out[0] {
            TrialOutcome::Skipped { reason, .. } => assert!(reason.contains("A1")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cross_validate_gamma(&cfg, &cell), Err(Error::Config(_))));
    }

    #[test]
    fn cross_validation_picks_argmin() {
        let cfg = ExperimentConfig { gamma_grid: vec![2.01, 4.0, 16.0, 64.0], ..tiny() };
        let cell = cfg.cells()[0];
        let cv = cross_validate_gamma(&cfg, &cell).unwrap();
        assert_eq!(cv.len(), 2);
        for (_, choice) in cv {
            let choice = choice.unwrap();
            assert_eq!(choice.completed_runs, 2);
            let best = choice.mean_rrmse.unwrap();
            assert!(choice.grid.iter().all(|(_, m)| best <= *m));
        }
        let one = ExperimentConfig { gamma_grid: vec![5.0], ..tiny() };
        let cv = cross_validate_gamma(&one, &cell).unwrap();
        assert!(cv.iter().all(|(_, c)| c.as_ref().unwrap().gamma == 5.0));
    }

    #[test]
    fn sweep_aggregates_match_rows() {
        let cfg = ExperimentConfig { trials: 2, ..tiny() };
        let table = run_sweep(&cfg).unwrap();
        assert_eq!(table.records.len(), 4);
        for s in &table.cells {
            let rows: Vec<&TrialRecord> = table.records.iter().filter(|r| r.estimator == s.estimator).collect();
            assert_eq!(rows.len(), 2);
            let mean = (rows[0].rrmse + rows[1].rrmse) / 2.0;
            assert!((s.rrmse.mean.unwrap() - mean).abs() < 1e-15);
            assert!(rows.iter().all(|r| Some(r.gamma) == s.gamma));
        }
    }

    #[test]
    fn csv_format() {
        assert_eq!(records_to_csv(&[]), TRIAL_CSV_HEADER.join(",") + "\n");
        let rec = TrialRecord {
            trial_index: 0,
            n: 2,
            p: 3,
            q: 0.5,
            f_s: 0.1,
            sigma: 0.05,
            q_a: 0.95,
            estimator: Estimator::Wlasso,
            gamma: 2.01,
            rrmse: 0.1 + 0.2,
            sensitivity: Some(1.0),
            specificity: None,
            lambda_hat: None,
            l1_norm_true: 12.5,
            c1_violated: false,
            pooling_warnings: 1,
            solver_iterations: 7,
            converged: true,
            noise_model: NoiseModel::Exact,
        };
        let text = records_to_csv(std::slice::from_ref(&rec));
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row, "0,2,3,0.5,0.1,0.05,0.95,wlasso,2.01,0.30000000000000004,1,NA,NA,12.5,false,1,7,true,exact");
        let parsed: f64 = row.split(',').nth(9).unwrap().parse().unwrap();
        assert_eq!(parsed, rec.rrmse);
        assert_eq!(records_to_csv(std::slice::from_ref(&rec)), text);
    }

    #[test]
    fn stat_values() {
        let s = Stat::of([1.0, 3.0]);
        assert_eq!(s.mean, Some(2.0));
        assert!((s.std.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of([4.0]).std, None);
        assert_eq!(Stat::of(std::iter::empty()).mean, None);
    }
}
