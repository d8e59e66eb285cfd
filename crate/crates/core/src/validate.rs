//! Monte-Carlo checks of the probabilistic guarantees behind the weights,
//! the arithmetic of the recovery bound, and the RRMSE trend study.
//!
//! Tail checks report the empirical violation rate next to the theoretical
//! rate and a 4σ binomial Monte-Carlo allowance computed at the theoretical
//! rate. Trials run in parallel on derived streams and are folded in trial
//! order, so every report is reproducible from its seed.

use std::fmt;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::harness::{
    csv_string, fmt_float, run_sweep, run_trial_scaled, simulate_instance, CellConfig, CellSummary,
    Estimator, ExperimentConfig, Purpose, Stat, TrialOutcome,
};
use crate::numerics::{label, DenseMatrix, DenseVector, RngStream};
use crate::pooling::{
    generate_pooling_matrix, surrogate_matrix, surrogate_measurements, PoolingMatrix, RecParams,
};
use crate::simulate::{generate_signal, measure_linearized, GroundTruth, NoiseParams, SignalSpec};
use crate::weights::{
    c_n_theta, check_assumptions, g_theta, gradient_at_truth, lambda_hat, r_matrices, w_statistic,
    WeightContext, WeightParams,
};

/// Largest acceptable rate of trials violating the gradient dominance condition.
pub const C1_TARGET_RATE: f64 = 0.01;

/// Relative slack for inequalities that hold exactly in real arithmetic.
pub const ROUNDING_TOL: f64 = 1e-12;

/// Trials per derived stream in the Bernstein check.
const BERNSTEIN_BLOCK: usize = 10_000;

/// Empirical violation count of a tail bound.
#[derive(Clone, Debug, PartialEq)]
pub struct TailReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// `violations / trials`; `None` without trials.
    pub empirical_rate: Option<f64>,
    pub theoretical_rate: f64,
    /// `4 sqrt(r (1 - r) / trials)` at the theoretical rate `r` (clamped to [0, 1]).
    pub monte_carlo_4sigma: f64,
}

impl TailReport {
    pub fn new(name: impl Into<String>, trials: usize, violations: usize, theoretical_rate: f64) -> Self {
        let r = theoretical_rate.clamp(0.0, 1.0);
        let (empirical_rate, monte_carlo_4sigma) = if trials == 0 {
            (None, 0.0)
        } else {
            let t = trials as f64;
            (Some(violations as f64 / t), 4.0 * (r * (1.0 - r) / t).sqrt())
        };
        TailReport {
            name: name.into(),
            trials,
            violations,
            empirical_rate,
            theoretical_rate,
            monte_carlo_4sigma,
        }
    }

    /// `empirical ≤ theoretical + 4σ`; `None` without trials.
    pub fn verdict(&self) -> Option<bool> {
        self.empirical_rate
            .map(|e| e <= self.theoretical_rate + self.monte_carlo_4sigma)
    }

    pub fn passes(&self) -> bool {
        self.verdict() == Some(true)
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.trials.to_string(),
            self.violations.to_string(),
            opt(self.empirical_rate),
            fmt_float(self.theoretical_rate),
            fmt_float(self.monte_carlo_4sigma),
            verdict_word(self.verdict()).to_string(),
        ]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_float)
}

fn verdict_word(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "NA",
    }
}

impl fmt::Display for TailReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} violations, rate {} vs bound {} (+{} MC) {}",
            self.name,
            self.violations,
            self.trials,
            opt(self.empirical_rate),
            fmt_float(self.theoretical_rate),
            fmt_float(self.monte_carlo_4sigma),
            verdict_word(self.verdict())
        )
    }
}

pub const TAIL_CSV_HEADER: [&str; 7] = [
    "check",
    "trials",
    "violations",
    "empirical_rate",
    "theoretical_rate",
    "monte_carlo_4sigma",
    "verdict",
];

pub fn tail_reports_to_csv(reports: &[&TailReport]) -> String {
    csv_string(&TAIL_CSV_HEADER, reports.iter().map(|r| r.csv_fields()))
}

fn require_assumptions(params: &WeightParams) -> Result<()> {
    let report = check_assumptions(params);
    if params.force {
        return Ok(());
    }
    let first = report.failures().next().map(|c| (c.name, c.message.clone()));
    match first {
        Some((name, detail)) => Err(Error::Assumption { name, detail }),
        None => Ok(()),
    }
}

/// Gradient dominance over the trials of one weight kind.
#[derive(Clone, Debug, PartialEq)]
pub struct C1Kind {
    /// Trials with at least one violated coordinate, against [`C1_TARGET_RATE`].
    pub trials: TailReport,
    /// Violated coordinates summed over trials.
    pub coordinate_violations: usize,
    /// Trials whose weights were unavailable.
    pub skipped: usize,
    /// Largest `|g_k| / β_k` seen.
    pub max_ratio: Option<f64>,
}

impl C1Kind {
    fn build(name: &str, rows: &[Option<(usize, f64)>]) -> Self {
        let done: Vec<(usize, f64)> = rows.iter().flatten().copied().collect();
        let violated = done.iter().filter(|(c, _)| *c > 0).count();
        C1Kind {
            trials: TailReport::new(name, done.len(), violated, C1_TARGET_RATE),
            coordinate_violations: done.iter().map(|(c, _)| c).sum(),
            skipped: rows.len() - done.len(),
            max_ratio: done.iter().map(|(_, r)| *r).reduce(f64::max),
        }
    }

    /// Target rate without Monte-Carlo slack.
    pub fn within_target(&self) -> bool {
        self.trials.empirical_rate.is_some_and(|r| r <= C1_TARGET_RATE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct C1Report {
    pub cell: CellConfig,
    pub lasso: C1Kind,
    pub wlasso: C1Kind,
}

impl fmt::Display for C1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient dominance at {}", self.cell.describe())?;
        for k in [&self.lasso, &self.wlasso] {
            writeln!(
                f,
                "  {}; coordinates {}; skipped {}; max |g|/beta {}",
                k.trials,
                k.coordinate_violations,
                k.skipped,
                opt(k.max_ratio)
            )?;
        }
        Ok(())
    }
}

fn dominance(grad: &DenseVector, beta: &DenseVector) -> (usize, f64) {
    let mut count = 0;
    let mut ratio = 0.0f64;
    for (g, b) in grad.iter().zip(beta) {
        let g = g.abs();
        if g > *b {
            count += 1;
        }
        ratio = ratio.max(if *b > 0.0 { g / b } else if g > 0.0 { f64::INFINITY } else { 0.0 });
    }
    (count, ratio)
}

/// Rate of trials with `|Ãᵀ(ỹ − Ãx*)|_k > β_k` for some `k`, for both weight
/// kinds, on fresh validation draws of `cell`.
pub fn validate_c1(config: &ExperimentConfig, cell: &CellConfig, trials: usize) -> Result<C1Report> {
    let wp = config.weight_params(cell)?;
    require_assumptions(&wp)?;
    type Row = (Option<(usize, f64)>, Option<(usize, f64)>);
    let rows: Vec<Row> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Row> {
            let inst = simulate_instance(config, cell, Purpose::Validation, t, 1.0)?;
            let ctx = match WeightContext::new(&inst.a, &inst.y, &wp) {
                Ok(ctx) => ctx,
                Err(Error::Assumption { .. }) => return Ok((None, None)),
                Err(e) => return Err(e),
            };
            let grad = gradient_at_truth(&inst.system.a_tilde, &inst.system.y_tilde, &inst.truth.x_star);
            let check = |ws: Result<crate::weights::WeightSet>| match ws {
                Ok(ws) => Ok(Some(dominance(&grad, &ws.expand(cell.p)))),
                Err(Error::Assumption { .. }) => Ok(None),
                Err(e) => Err(e),
            };
            Ok((check(ctx.lasso())?, check(ctx.wlasso())?))
        })
        .collect::<Result<_>>()?;
    let lasso: Vec<_> = rows.iter().map(|r| r.0).collect();
    let wlasso: Vec<_> = rows.iter().map(|r| r.1).collect();
    Ok(C1Report {
        cell: *cell,
        lasso: C1Kind::build("c1 lasso", &lasso),
        wlasso: C1Kind::build("c1 wlasso", &wlasso),
    })
}

/// Coverage of `‖x*‖₁` by `Λ̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaReport {
    pub cell: CellConfig,
    pub trials: usize,
    /// Trials where `Λ̂` could not be formed.
    pub invalid: usize,
    pub ratio: Stat,
    pub ratio_min: Option<f64>,
    pub ratio_max: Option<f64>,
    /// Fraction of valid trials with `Λ̂ < ‖x*‖₁`.
    pub undercoverage: Option<f64>,
    /// Fraction of valid trials with `Λ̂ > 2‖x*‖₁`.
    pub above_two: Option<f64>,
    pub l1_norm: Stat,
    pub lambda_hat: Stat,
}

impl fmt::Display for LambdaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |st: &Stat| format!("{} (std {})", opt(st.mean), opt(st.std));
        writeln!(f, "lambda-hat coverage at {}", self.cell.describe())?;
        writeln!(f, "  trials {}, invalid {}", self.trials, self.invalid)?;
        writeln!(f, "  mean |x*|_1 {}", s(&self.l1_norm))?;
        writeln!(f, "  mean lambda-hat {}", s(&self.lambda_hat))?;
        writeln!(
            f,
            "  ratio mean {} min {} max {}",
            s(&self.ratio),
            opt(self.ratio_min),
            opt(self.ratio_max)
        )?;
        writeln!(
            f,
            "  undercoverage {}, above two {}",
            opt(self.undercoverage),
            opt(self.above_two)
        )
    }
}

pub fn validate_lambda_hat(config: &ExperimentConfig, cell: &CellConfig, trials: usize) -> Result<LambdaReport> {
    let wp = config.weight_params(cell)?;
    require_assumptions(&wp)?;
    let rows: Vec<Option<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let inst = simulate_instance(config, cell, Purpose::Validation, t, 1.0)?;
            match lambda_hat(&inst.y, &wp) {
                Ok(l) => Ok(Some((l, inst.truth.l1_norm()))),
                Err(Error::Assumption { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let valid: Vec<(f64, f64)> = rows.iter().flatten().copied().collect();
    let ratios: Vec<f64> = valid.iter().map(|(l, x)| l / x).collect();
    let frac = |pred: &dyn Fn(&(f64, f64)) -> bool| {
        (!valid.is_empty()).then(|| valid.iter().filter(|v| pred(v)).count() as f64 / valid.len() as f64)
    };
    Ok(LambdaReport {
        cell: *cell,
        trials,
        invalid: trials - valid.len(),
        ratio: Stat::of(ratios.iter().copied()),
        ratio_min: ratios.iter().copied().reduce(f64::min),
        ratio_max: ratios.iter().copied().reduce(f64::max),
        undercoverage: frac(&|(l, x)| l < x),
        above_two: frac(&|(l, x)| *l > 2.0 * x),
        l1_norm: Stat::of(valid.iter().map(|v| v.1)),
        lambda_hat: Stat::of(valid.iter().map(|v| v.0)),
    })
}

/// Lower tail of a Binomial(n, q) sum: `P(S_n ≤ nq − C'_{n,θ})` against `e^{−θ}`.
pub fn validate_bernstein(n: usize, q: f64, theta: f64, trials: usize, seed: u64) -> Result<TailReport> {
    if n == 0 || !(q > 0.0 && q < 1.0) || !(theta > 0.0 && theta.is_finite()) {
        return Err(param(format!(
            "Bernstein check needs n >= 1, q in (0, 1), theta > 0; got n = {n}, q = {q}, theta = {theta}"
        )));
    }
    let dist = Binomial::new(n as u64, q).map_err(|e| param(e.to_string()))?;
    let cut = n as f64 * q - c_n_theta(n, q, theta);
    let blocks = trials.div_ceil(BERNSTEIN_BLOCK);
    let violations: usize = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut s = RngStream::new(seed, &[label("bernstein"), b as u64]);
            let len = BERNSTEIN_BLOCK.min(trials - b * BERNSTEIN_BLOCK);
            (0..len).filter(|_| (dist.sample(s.rng()) as f64) <= cut).count()
        })
        .sum();
    Ok(TailReport::new(
        format!("bernstein n={n} q={q} theta={theta}"),
        trials,
        violations,
        (-theta).exp(),
    ))
}

/// Parameters of the Gaussian concentration check.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSetup {
    pub n: usize,
    pub q: f64,
    pub sigma: f64,
    pub q_a: f64,
    pub theta: f64,
    pub trials: usize,
    /// Samples per design; must exceed `n`.
    pub p: usize,
    pub f_s: f64,
    pub seed: u64,
}

impl GaussianSetup {
    pub fn new(n: usize, q: f64, sigma: f64, q_a: f64, theta: f64, trials: usize) -> Self {
        GaussianSetup { n, q, sigma, q_a, theta, trials, p: 2 * n, f_s: 0.04, seed: 0 }
    }
}

/// Deviations `rᵀ(y − Ax*)` against the radius `√(r̄ᵀy²)·κ√(2θ)/(1 − κ√(2g(θ)))`,
/// for `r` a column of `R` and for `r = −1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianReport {
    pub column_two_sided: TailReport,
    pub column_one_sided: TailReport,
    pub ones_two_sided: TailReport,
    pub ones_one_sided: TailReport,
    pub radius_factor: f64,
    /// `σ = 0`: deviations and radii are identically zero.
    pub degenerate: bool,
}

impl GaussianReport {
    pub fn reports(&self) -> [&TailReport; 4] {
        [
            &self.column_two_sided,
            &self.column_one_sided,
            &self.ones_two_sided,
            &self.ones_one_sided,
        ]
    }

    pub fn passes(&self) -> bool {
        self.reports().iter().all(|r| r.passes())
    }
}

impl fmt::Display for GaussianReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.reports() {
            writeln!(f, "{r}")?;
        }
        if self.degenerate {
            writeln!(f, "(noise-free: every deviation and radius is zero)")?;
        }
        Ok(())
    }
}

/// Linearised noise model; the design, signal and noise are drawn afresh per trial.
pub fn validate_gaussian_concentration(setup: &GaussianSetup) -> Result<GaussianReport> {
    let GaussianSetup { n, q, sigma, q_a, theta, trials, p, f_s, seed } = *setup;
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(param(format!("theta = {theta} must be finite and positive")));
    }
    let noise = NoiseParams::new(sigma, q_a)?;
    let kappa = noise.kappa();
    let g = g_theta(theta, n)?;
    let margin = 1.0 - kappa * (2.0 * g).sqrt();
    if !(margin > 0.0) {
        return Err(Error::Assumption {
            name: "A3",
            detail: format!("kappa sqrt(2 g(theta)) = {} is not below 1", 1.0 - margin),
        });
    }
    let factor = kappa * (2.0 * theta).sqrt() / margin;
    let spec = SignalSpec::new(p, f_s);
    let nf = n as f64;
    let r_denom = nf * (nf - 1.0) * q * (1.0 - q);

    let rows: Vec<[bool; 4]> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let root = RngStream::new(seed, &[label("gaussian"), t as u64]);
            let a = generate_pooling_matrix(n, p, q, &mut root.derive(label("pooling")))?;
            let truth = generate_signal(&spec, &mut root.derive(label("signal")))?;
            let y = measure_linearized(&a, &truth.x_star, &noise, &mut root.derive(label("noise")))?;
            let ax = a.apply(&truth.x_star);
            let col = a.matrix().column(0);
            let c0 = col.sum();
            let (mut dev_col, mut sq_col, mut dev_ones, mut sq_ones) = (0.0, 0.0, 0.0, 0.0);
            for l in 0..n {
                let r = (nf * col[l] - c0) / r_denom;
                let e = y[l] - ax[l];
                let y2 = y[l] * y[l];
                dev_col += r * e;
                sq_col += r * r * y2;
                dev_ones -= e;
                sq_ones += y2;
            }
            let rad_col = sq_col.sqrt() * factor;
            let rad_ones = sq_ones.sqrt() * factor;
            Ok([
                dev_col.abs() > rad_col,
                dev_col > rad_col,
                dev_ones.abs() > rad_ones,
                dev_ones > rad_ones,
            ])
        })
        .collect::<Result<_>>()?;
    let count = |i: usize| rows.iter().filter(|r| r[i]).count();
    let e = (-theta).exp();
    let tag = format!("n={n} q={q} sigma={sigma} theta={theta}");
    Ok(GaussianReport {
        column_two_sided: TailReport::new(format!("gaussian column two-sided {tag}"), trials, count(0), 3.0 * e),
        column_one_sided: TailReport::new(format!("gaussian column one-sided {tag}"), trials, count(1), 2.0 * e),
        ones_two_sided: TailReport::new(format!("gaussian ones two-sided {tag}"), trials, count(2), 3.0 * e),
        ones_one_sided: TailReport::new(format!("gaussian ones one-sided {tag}"), trials, count(3), 2.0 * e),
        radius_factor: factor,
        degenerate: kappa == 0.0,
    })
}

/// `(Σ_l s_l (Σ_m a_lm x_m)², max_m (Σ_l s_l a_lm) · ‖x‖₁²)` for binary `a`
/// and nonnegative `s`; the first never exceeds the second.
pub fn auxiliary_inequality(s: &DenseVector, a: &DenseMatrix, x: &DenseVector) -> Result<(f64, f64)> {
    if a.nrows() != s.len() || a.ncols() != x.len() {
        return Err(param(format!(
            "shape mismatch: a is {}x{}, s has {}, x has {}",
            a.nrows(),
            a.ncols(),
            s.len(),
            x.len()
        )));
    }
    let ax = a.dot(x);
    let lhs = s.iter().zip(&ax).map(|(s, v)| s * v * v).sum();
    let weighted = a.t().dot(s);
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    Ok((lhs, weighted.iter().fold(0.0f64, |m, &v| m.max(v)) * l1 * l1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxReport {
    pub instances: usize,
    /// Instances with `lhs > rhs (1 + ROUNDING_TOL)`.
    pub violations: usize,
    /// Largest `(lhs − rhs) / rhs` over instances with `rhs > 0`.
    pub max_relative_excess: f64,
}

impl fmt::Display for AuxReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "auxiliary inequality: {}/{} violations, max relative excess {}",
            self.violations,
            self.instances,
            fmt_float(self.max_relative_excess)
        )
    }
}

/// Random instances with `n, p ≤ 12`, `s` uniform on `[0, 2)`, Bernoulli(1/2)
/// entries and signed Gaussian `x`.
pub fn validate_auxiliary(instances: usize, seed: u64) -> Result<AuxReport> {
    let rows: Vec<(f64, f64)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut st = RngStream::new(seed, &[label("auxiliary"), i as u64]);
            let n = 1 + st.index(12);
            let p = 1 + st.index(12);
            let s = DenseVector::from_shape_simple_fn(n, || st.uniform(0.0, 2.0));
            let a = DenseMatrix::from_shape_simple_fn((n, p), || st.index(2) as f64);
            let x = DenseVector::from_shape_simple_fn(p, || crate::numerics::sample_standard_normal(&mut st));
            auxiliary_inequality(&s, &a, &x)
        })
        .collect::<Result<_>>()?;
    let violations = rows.iter().filter(|(l, r)| *l > r * (1.0 + ROUNDING_TOL)).count();
    let max_relative_excess = rows
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .map(|(l, r)| (l - r) / r)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(AuxReport { instances, violations, max_relative_excess })
}

/// `(max_k R̄_kᵀ(Ax)², ‖x‖₁² W)`; the first never exceeds the second.
pub fn dominance_chain(a: &PoolingMatrix, x: &DenseVector) -> Result<(f64, f64)> {
    if x.len() != a.p() {
        return Err(param(format!("signal length {} does not match p = {}", x.len(), a.p())));
    }
    let rm = r_matrices(a)?;
    let ax2 = a.apply(x).mapv(|v| v * v);
    let lhs = rm.r_bar.t().dot(&ax2).iter().fold(0.0f64, |m, &v| m.max(v));
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    Ok((lhs, l1 * l1 * w_statistic(a, &rm)))
}

/// Monte-Carlo means of `ÃᵀÃ` and of `Ãᵀ(ỹ − Ãx*)` for a fixed `x*`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub draws: usize,
    /// `max |mean(ÃᵀÃ) − I|` entrywise.
    pub max_gram_deviation: f64,
    /// `max_k |mean gradient_k|`.
    pub max_mean_gradient: f64,
    /// Largest `|gradient_k|` over all draws.
    pub max_gradient_magnitude: f64,
}

impl IdentityReport {
    pub fn gradient_ratio(&self) -> f64 {
        self.max_mean_gradient / self.max_gradient_magnitude
    }
}

impl fmt::Display for IdentityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "surrogate identities over {} draws: max |mean gram - I| {}, max |mean gradient| {} ({} of max magnitude {})",
            self.draws,
            fmt_float(self.max_gram_deviation),
            fmt_float(self.max_mean_gradient),
            fmt_float(self.gradient_ratio()),
            fmt_float(self.max_gradient_magnitude)
        )
    }
}

/// Fresh designs and linearised noise (`σ = 0.05`, `q_a = 0.95`) around one
/// signal with `f_s = 0.1`.
pub fn validate_surrogate_identities(n: usize, p: usize, q: f64, draws: usize, seed: u64) -> Result<IdentityReport> {
    if draws == 0 {
        return Err(param("at least one draw is needed"));
    }
    const CHUNK: usize = 500;
    let noise = NoiseParams::new(0.05, 0.95)?;
    let truth = generate_signal(&SignalSpec::new(p, 0.1), &mut RngStream::new(seed, &[label("identity-signal")]))?;
    let chunks = draws.div_ceil(CHUNK);
    let partial: Vec<(DenseMatrix, DenseVector, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut gram = DenseMatrix::zeros((p, p));
            let mut grad = DenseVector::zeros(p);
            let mut peak = 0.0f64;
            for d in c * CHUNK..((c + 1) * CHUNK).min(draws) {
                let root = RngStream::new(seed, &[label("identity"), d as u64]);
                let a = generate_pooling_matrix(n, p, q, &mut root.derive(label("pooling")))?;
                let y = measure_linearized(&a, &truth.x_star, &noise, &mut root.derive(label("noise")))?;
                let at = surrogate_matrix(&a);
                let yt = surrogate_measurements(&y, n, q)?;
                gram += &at.t().dot(&at);
                let g = gradient_at_truth(&at, &yt, &truth.x_star);
                peak = g.iter().fold(peak, |m, v| m.max(v.abs()));
                grad += &g;
            }
            Ok((gram, grad, peak))
        })
        .collect::<Result<_>>()?;
    let mut gram = DenseMatrix::zeros((p, p));
    let mut grad = DenseVector::zeros(p);
    let mut peak = 0.0f64;
    for (g, v, m) in partial {
        gram += &g;
        grad += &v;
        peak = peak.max(m);
    }
    let d = draws as f64;
    let max_gram_deviation = gram
        .indexed_iter()
        .map(|((i, j), v)| (v / d - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    let max_mean_gradient = grad.iter().map(|v| (v / d).abs()).fold(0.0, f64::max);
    Ok(IdentityReport { draws, max_gram_deviation, max_mean_gradient, max_gradient_magnitude: peak })
}

/// `ρ_γ = γ(γ + 2)/(γ − 2)`.
pub fn rho_gamma(gamma: f64) -> Result<f64> {
    if !(gamma > 2.0) {
        return Err(param(format!("gamma = {gamma} must exceed 2")));
    }
    Ok(gamma * (gamma + 2.0) / (gamma - 2.0))
}

/// Inputs of the recovery error bound. Uniform weights give the LASSO form.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop3Inputs {
    pub gamma: f64,
    pub epsilon: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub support: Vec<usize>,
    /// `β_k` for every sample.
    pub weights: DenseVector,
    /// Unknown universal constant; bound values are reported up to it.
    pub c_universal: f64,
}

impl Prop3Inputs {
    pub fn new(gamma: f64, epsilon: f64, kappa1: f64, kappa2: f64, support: Vec<usize>, weights: DenseVector) -> Self {
        Prop3Inputs { gamma, epsilon, kappa1, kappa2, support, weights, c_universal: 1.0 }
    }

    /// Support taken from the significant entries of `truth`, `κ₁, κ₂` from `rec`.
    pub fn from_truth(gamma: f64, epsilon: f64, rec: &RecParams, truth: &GroundTruth, weights: DenseVector) -> Self {
        Prop3Inputs::new(gamma, epsilon, rec.kappa1, rec.kappa2, truth.support.clone(), weights)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop3Bound {
    pub rho_gamma: f64,
    /// `c ρ_γ ‖β_S‖₂ / ε²`, up to the universal constant.
    pub bound: f64,
    pub beta_s_norm: f64,
    /// `β_min (κ₂ − ε)/(κ₁ ρ_γ)`.
    pub gating_limit: f64,
    /// `‖β_S‖₂ ≤ gating_limit`.
    pub gating_holds: bool,
}

pub fn prop3_bound(inputs: &Prop3Inputs) -> Result<Prop3Bound> {
    let rho = rho_gamma(inputs.gamma)?;
    let Prop3Inputs { epsilon, kappa1, kappa2, c_universal, .. } = *inputs;
    if !(epsilon > 0.0 && epsilon < kappa2) {
        return Err(param(format!("epsilon = {epsilon} must lie in (0, kappa2 = {kappa2})")));
    }
    if !(kappa1 >= 0.0) || !(c_universal > 0.0) {
        return Err(param(format!(
            "kappa1 = {kappa1} must be nonnegative and c = {c_universal} positive"
        )));
    }
    let w = &inputs.weights;
    if w.is_empty() || w.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(param("weights must be a nonempty vector of finite nonnegative values"));
    }
    if let Some(k) = inputs.support.iter().find(|&&k| k >= w.len()) {
        return Err(param(format!("support index {k} out of range for p = {}", w.len())));
    }
    let beta_s_norm = inputs.support.iter().map(|&k| w[k] * w[k]).sum::<f64>().sqrt();
    let beta_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let gating_limit = if kappa1 == 0.0 { f64::INFINITY } else { beta_min * (kappa2 - epsilon) / (kappa1 * rho) };
    Ok(Prop3Bound {
        rho_gamma: rho,
        bound: c_universal * rho * beta_s_norm / (epsilon * epsilon),
        beta_s_norm,
        gating_limit,
        gating_holds: beta_s_norm <= gating_limit,
    })
}

/// Means of one estimator along one grid axis with the others held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendVerdict {
    pub estimator: Estimator,
    pub axis: &'static str,
    pub fixed: String,
    /// `(axis value, mean RRMSE)` in increasing axis order.
    pub points: Vec<(f64, Option<f64>)>,
    /// `None` when a mean is missing.
    pub holds: Option<bool>,
}

impl fmt::Display for TrendVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pts: Vec<String> = self
            .points
            .iter()
            .map(|(x, m)| format!("{}={}:{}", self.axis, x, opt(*m)))
            .collect();
        write!(
            f,
            "{} [{}] {} {}",
            self.estimator.as_str(),
            self.fixed,
            pts.join(" "),
            verdict_word(self.holds)
        )
    }
}

/// RRMSE of the same trials with the signal multiplied by each scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleReport {
    pub cell: CellConfig,
    pub scales: Vec<f64>,
    pub compared: usize,
    /// Largest `|RRMSE(scale) − RRMSE(first scale)|`.
    pub max_abs_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendReport {
    pub summaries: Vec<CellSummary>,
    /// Strictly decreasing in `n`.
    pub n_trend: Vec<TrendVerdict>,
    /// Strictly increasing in `f_s`.
    pub f_s_trend: Vec<TrendVerdict>,
    /// Non-decreasing in `q`.
    pub q_trend: Vec<TrendVerdict>,
    pub scale: Option<ScaleReport>,
}

impl TrendReport {
    pub fn mean_rrmse(&self, n: usize, f_s: f64, q: f64, estimator: Estimator) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.cell.n == n && s.cell.f_s == f_s && s.cell.q == q && s.estimator == estimator)
            .and_then(|s| s.rrmse.mean)
    }
}

impl fmt::Display for TrendReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean RRMSE per cell")?;
        for s in &self.summaries {
            writeln!(
                f,
                "  {} {} gamma {} rrmse {} trials {} skipped {}",
                s.cell.describe(),
                s.estimator.as_str(),
                opt(s.gamma),
                opt(s.rrmse.mean),
                s.trials,
                s.skipped
            )?;
        }
        for (title, list) in [("n", &self.n_trend), ("f_s", &self.f_s_trend), ("q", &self.q_trend)] {
            if !list.is_empty() {
                writeln!(f, "trend in {title}")?;
                for v in list {
                    writeln!(f, "  {v}")?;
                }
            }
        }
        if let Some(sc) = &self.scale {
            writeln!(
                f,
                "signal scales {:?} at {}: {} pairs, max |diff| {}",
                sc.scales,
                sc.cell.describe(),
                sc.compared,
                opt(sc.max_abs_diff)
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Shape {
    Decreasing,
    Increasing,
    NonDecreasing,
}

fn verdict(points: &[(f64, Option<f64>)], shape: Shape) -> Option<bool> {
    let means: Option<Vec<f64>> = points.iter().map(|p| p.1).collect();
    let means = means?;
    Some(means.windows(2).all(|w| match shape {
        Shape::Decreasing => w[1] < w[0],
        Shape::Increasing => w[1] > w[0],
        Shape::NonDecreasing => w[1] >= w[0],
    }))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// Runs the sweep for `config` and checks the RRMSE trends along every axis
/// with at least two values. With `scales` nonempty, the main trials of the
/// first cell are repeated with the signal multiplied by each scale.
pub fn validate_trends(config: &ExperimentConfig, scales: &[f64]) -> Result<TrendReport> {
    let table = run_sweep(config)?;
    let mean = |sigma: f64, q: f64, n: usize, f_s: f64, e: Estimator| {
        table
            .summary_at(sigma, q, n, f_s, e)
            .and_then(|s| s.rrmse.mean)
    };
    let ns: Vec<usize> = {
        let mut v = config.n_list.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let fs = sorted(&config.f_s_list);
    let qs = sorted(&config.q_list);
    let (mut n_trend, mut f_s_trend, mut q_trend) = (Vec::new(), Vec::new(), Vec::new());
    for sigma in config.sigmas() {
        for &e in &config.estimators {
            if ns.len() > 1 {
                for &q in &qs {
                    for &f in &fs {
                        let points: Vec<_> = ns.iter().map(|&n| (n as f64, mean(sigma, q, n, f, e))).collect();
                        n_trend.push(TrendVerdict {
                            estimator: e,
                            axis: "n",
                            fixed: format!("sigma={sigma} q={q} f_s={f}"),
                            holds: verdict(&points, Shape::Decreasing),
                            points,
                        });
                    }
                }
            }
            if fs.len() > 1 {
                for &q in &qs {
                    for &n in &ns {
                        let points: Vec<_> = fs.iter().map(|&f| (f, mean(sigma, q, n, f, e))).collect();
                        f_s_trend.push(TrendVerdict {
                            estimator: e,
                            axis: "f_s",
                            fixed: format!("sigma={sigma} q={q} n={n}"),
                            holds: verdict(&points, Shape::Increasing),
                            points,
                        });
                    }
                }
            }
            if qs.len() > 1 {
                for &n in &ns {
                    for &f in &fs {
                        let points: Vec<_> = qs.iter().map(|&q| (q, mean(sigma, q, n, f, e))).collect();
                        q_trend.push(TrendVerdict {
                            estimator: e,
                            axis: "q",
                            fixed: format!("sigma={sigma} n={n} f_s={f}"),
                            holds: verdict(&points, Shape::NonDecreasing),
                            points,
                        });
                    }
                }
            }
        }
    }

    let scale = match (scales.first(), config.cells().first()) {
        (Some(&base), Some(cell)) => {
            let gammas: Vec<(Estimator, f64)> = config
                .estimators
                .iter()
                .filter_map(|&e| table.summary(cell, e).and_then(|s| s.gamma).map(|g| (e, g)))
                .collect();
            let runs: Vec<Vec<Vec<TrialOutcome>>> = (0..config.trials)
                .into_par_iter()
                .map(|t| {
                    scales
                        .iter()
                        .map(|&a| run_trial_scaled(config, cell, t, &gammas, a / base))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let mut compared = 0;
            let mut max_abs_diff: Option<f64> = None;
            for per_scale in &runs {
                for (i, first) in per_scale[0].iter().enumerate() {
                    let Some(r0) = first.record() else { continue };
                    for other in &per_scale[1..] {
                        if let Some(r) = other[i].record() {
                            compared += 1;
                            let d = (r.rrmse - r0.rrmse).abs();
                            max_abs_diff = Some(max_abs_diff.map_or(d, |m| m.max(d)));
                        }
                    }
                }
            }
            Some(ScaleReport { cell: *cell, scales: scales.to_vec(), compared, max_abs_diff })
        }
        _ => None,
    };
    Ok(TrendReport { summaries: table.cells, n_trend, f_s_trend, q_trend, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn tail_report_arithmetic() {
        let r = TailReport::new("x", 100, 3, 0.05);
        assert_eq!(r.empirical_rate, Some(0.03));
        assert!((r.monte_carlo_4sigma - 4.0 * (0.05f64 * 0.95 / 100.0).sqrt()).abs() < 1e-15);
        assert!(r.passes());
        let empty = TailReport::new("x", 0, 0, 0.05);
        assert_eq!(empty.empirical_rate, None);
        assert_eq!(empty.verdict(), None);
        assert!(!TailReport::new("x", 100, 50, 0.05).passes());
        let csv = tail_reports_to_csv(&[&r, &empty]);
        assert!(csv.starts_with("check,trials,violations"));
        assert!(csv.lines().nth(2).unwrap().ends_with("NA"));
    }

    #[test]
    fn rho_gamma_values() {
        assert_eq!(rho_gamma(4.0).unwrap(), 12.0);
        let g = 1e6;
        assert!((rho_gamma(g).unwrap() / g - 1.0).abs() < 1e-5);
        assert!(rho_gamma(2.0).is_err());
    }

    #[test]
    fn prop3_uniform_weights_match_lasso_form() {
        let beta = 0.7;
        let support = vec![1, 4, 7];
        let inputs = Prop3Inputs::new(4.0, 0.1, 0.01, 0.25, support, Array1::from_elem(10, beta));
        let b = prop3_bound(&inputs).unwrap();
        let lasso = 12.0 / 0.01 * beta * 3f64.sqrt();
        assert!((b.bound - lasso).abs() < 1e-12 * lasso);
        let sqrt_s_limit = (0.25 - 0.1) / (0.01 * 12.0);
        assert_eq!(b.gating_holds, 3f64.sqrt() <= sqrt_s_limit);
    }

    #[test]
    fn prop3_support_from_truth() {
        let truth = generate_signal(&SignalSpec::new(50, 0.1), &mut RngStream::new(1, &[])).unwrap();
        let rec = crate::pooling::rec_parameters(400, 50, 0.5, 1.0).unwrap();
        let inputs = Prop3Inputs::from_truth(4.0, 0.1, &rec, &truth, Array1::from_elem(50, 2.0));
        assert_eq!(inputs.support, truth.support);
        let b = prop3_bound(&inputs).unwrap();
        assert!((b.beta_s_norm - 2.0 * (truth.s as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn prop3_monotone_and_errors() {
        let w = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        let base = Prop3Inputs::new(5.0, 0.1, 0.0, 0.25, vec![0], w.clone());
        let b0 = prop3_bound(&base).unwrap();
        assert!(b0.gating_holds);
        let b1 = prop3_bound(&Prop3Inputs { support: vec![0, 2], ..base.clone() }).unwrap();
        assert!(b1.bound > b0.bound);
        let b2 = prop3_bound(&Prop3Inputs { epsilon: 0.05, ..base.clone() }).unwrap();
        assert!(b2.bound > b0.bound);
        let c2 = prop3_bound(&Prop3Inputs { c_universal: 2.0, ..base.clone() }).unwrap();
        assert!((c2.bound - 2.0 * b0.bound).abs() < 1e-12);
        assert!(prop3_bound(&Prop3Inputs { epsilon: 0.25, ..base.clone() }).is_err());
        assert!(prop3_bound(&Prop3Inputs { epsilon: 0.0, ..base.clone() }).is_err());
        assert!(prop3_bound(&Prop3Inputs { support: vec![3], ..base.clone() }).is_err());
        assert!(prop3_bound(&Prop3Inputs { gamma: 1.5, ..base }).is_err());
    }

    #[test]
    fn bernstein_large_theta_and_symmetry() {
        let r = validate_bernstein(100, 0.5, 50.0, 20_000, 3).unwrap();
        assert_eq!(r.violations, 0);
        for q in [0.3, 0.7] {
            let r = validate_bernstein(60, q, 1.5, 50_000, 4).unwrap();
            assert!(r.passes(), "{r}");
        }
        assert!(validate_bernstein(10, 0.5, 0.0, 10, 0).is_err());
        let a = validate_bernstein(40, 0.5, 1.0, 25_000, 9).unwrap();
        assert_eq!(a, validate_bernstein(40, 0.5, 1.0, 25_000, 9).unwrap());
    }

    #[test]
    fn gaussian_zero_noise_and_a3() {
        let r = validate_gaussian_concentration(&GaussianSetup::new(30, 0.5, 0.0, 0.95, 2.0, 200)).unwrap();
        assert!(r.degenerate);
        assert!(r.reports().iter().all(|t| t.violations == 0));
        let bad = GaussianSetup::new(30, 0.5, 20.0, 0.95, 2.0, 10);
        assert!(matches!(
            validate_gaussian_concentration(&bad),
            Err(Error::Assumption { name: "A3", .. })
        ));
    }

    #[test]
    fn gaussian_small_run_passes() {
        let r = validate_gaussian_concentration(&GaussianSetup::new(40, 0.5, 0.05, 0.95, 1.5, 4000)).unwrap();
        assert!(r.passes(), "{r}");
    }

    #[test]
    fn auxiliary_equality_case() {
        let s = Array1::from_vec(vec![1.0, 2.0]);
        let a = DenseMatrix::from_elem((2, 1), 1.0);
        let x = Array1::from_vec(vec![-3.0]);
        let (l, r) = auxiliary_inequality(&s, &a, &x).unwrap();
        assert_eq!(l, 27.0);
        assert_eq!(r, 27.0);
        let rep = validate_auxiliary(500, 1).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.max_relative_excess <= ROUNDING_TOL);
    }

    #[test]
    fn dominance_chain_holds_on_random_designs() {
        for i in 0..20 {
            let mut st = RngStream::new(5, &[i]);
            let a = generate_pooling_matrix(15, 40, 0.3, &mut st).unwrap();
            let x = generate_signal(&SignalSpec::new(40, 0.1), &mut st).unwrap().x_star;
            let (l, r) = dominance_chain(&a, &x).unwrap();
            assert!(l <= r * (1.0 + ROUNDING_TOL), "{l} > {r}");
        }
    }

    #[test]
    fn identities_small() {
        let r = validate_surrogate_identities(20, 25, 0.4, 2000, 2).unwrap();
        assert!(r.max_gram_deviation < 0.15, "{r}");
        assert!(r.gradient_ratio() < 0.1, "{r}");
        assert!(validate_surrogate_identities(20, 25, 0.4, 0, 2).is_err());
    }

    #[test]
    fn c1_and_lambda_empty_runs() {
        let config = ExperimentConfig::default();
        let cell = CellConfig { n: 60, p: 120, q: 0.5, f_s: 0.05, sigma: 0.05, q_a: 0.95 };
        let c1 = validate_c1(&config, &cell, 0).unwrap();
        assert_eq!(c1.lasso.trials.empirical_rate, None);
        let lam = validate_lambda_hat(&config, &cell, 0).unwrap();
        assert_eq!(lam.undercoverage, None);
    }

    #[test]
    fn c1_small_cell() {
        let config = ExperimentConfig::default();
        let cell = CellConfig { n: 60, p: 120, q: 0.5, f_s: 0.05, sigma: 0.05, q_a: 0.95 };
        let r = validate_c1(&config, &cell, 20).unwrap();
        assert_eq!(r.lasso.trials.trials + r.lasso.skipped, 20);
        assert!(r.wlasso.trials.violations <= r.wlasso.coordinate_violations);
        assert!(r.wlasso.coordinate_violations <= 20 * cell.p);
        let again = validate_c1(&config, &cell, 20).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn c1_requires_assumptions_unless_forced() {
        let config = ExperimentConfig::default();
        let cell = CellConfig { n: 10, p: 60, q: 0.1, f_s: 0.05, sigma: 0.05, q_a: 0.95 };
        assert!(matches!(validate_c1(&config, &cell, 2), Err(Error::Assumption { .. })));
        let forced = ExperimentConfig { force_assumptions: true, ..config };
        let r = validate_lambda_hat(&forced, &cell, 5).unwrap();
        assert_eq!(r.invalid, 5);
    }

    #[test]
    fn verdict_shapes() {
        let p = |v: &[f64]| v.iter().enumerate().map(|(i, m)| (i as f64, Some(*m))).collect::<Vec<_>>();
        assert_eq!(verdict(&p(&[3.0, 2.0, 1.0]), Shape::Decreasing), Some(true));
        assert_eq!(verdict(&p(&[3.0, 3.0]), Shape::Decreasing), Some(false));
        assert_eq!(verdict(&p(&[3.0, 3.0]), Shape::NonDecreasing), Some(true));
        assert_eq!(verdict(&p(&[1.0, 2.0]), Shape::Increasing), Some(true));
        assert_eq!(verdict(&[(0.0, Some(1.0)), (1.0, None)], Shape::Increasing), None);
    }
}
