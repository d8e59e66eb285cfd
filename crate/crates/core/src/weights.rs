//! Data-dependent regularisation weights for the LASSO and weighted LASSO
//! under multiplicative lognormal noise.
//!
//! Every quantity is written for a general confidence level `θ`. The
//! production setting `θ = 3 ln p` reproduces the closed forms
//!
//! ```text
//! Λ̂   = [Σy + sqrt(Σy²) κ sqrt(6 ln p) / (1 − κ sqrt(2 g(3 ln p)))]
//!       / [nq − sqrt(6 nq(1−q) ln p) − max(q,1−q) ln p]
//! β   = κ Λ̂ sqrt(6 W ln p) + c (3 ln p / n + 9 max(q²,(1−q)²) ln²p / (n² q(1−q))) Λ̂
//! β_k = sqrt(R̄_kᵀ y²) κ sqrt(6 ln p) / (1 − κ sqrt(2 g(3 ln p))) + (same Λ̂ term)
//! ```
//!
//! where `R[l,k] = (n a_lk − Σ_l' a_l'k) / (n(n−1)q(1−q))`, `R̄ = R ⊙ R` and
//! `W = max (R̄ᵀA)`. `R` is stored pools × samples, so `R_k` is a column.

use std::fmt;

use ndarray::{Array1, Axis};

use crate::error::{param, Error, Result};
use crate::numerics::{DenseMatrix, DenseVector};
use crate::pooling::PoolingMatrix;
use crate::simulate::NoiseParams;

/// Constant that provably works for the `Λ̂` term once `n ≥ 20`.
pub const C_PROVABLE: f64 = 126.0;

/// `g(θ) = ln(1 / (1 − (1 − e^{−θ})^{1/n}))`.
pub fn g_theta(theta: f64, n: usize) -> Result<f64> {
    if !(theta > 0.0) || n == 0 {
        return Err(param(format!("g(theta) needs theta > 0 and n >= 1, got theta = {theta}, n = {n}")));
    }
    let tail = (-theta).exp();
    if tail < 1e-300 {
        // 1 − (1 − t)^{1/n} = t/n + O(t²)
        return Ok(theta + (n as f64).ln());
    }
    let log_root = (-tail).ln_1p() / n as f64;
    Ok(-(-log_root.exp_m1()).ln())
}

/// Sufficient noise level for assumption A3 whatever `n < p` and `q_a`:
/// `1 / (2 ln 2 sqrt(2 ln p))`.
pub fn sigma_bound_simplified(p: usize) -> f64 {
    1.0 / (2.0 * std::f64::consts::LN_2 * (2.0 * (p as f64).ln()).sqrt())
}

/// Bernstein deviation radius for a Binomial(n, q) column sum:
/// `sqrt(2 n q(1−q) θ) + max(q, 1−q) θ / 3`.
pub fn c_n_theta(n: usize, q: f64, theta: f64) -> f64 {
    (2.0 * n as f64 * q * (1.0 - q) * theta).sqrt() + q.max(1.0 - q) * theta / 3.0
}

/// Inputs of the weight formulas that do not come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightParams {
    /// Confidence level; production weights use `3 ln p`.
    pub theta: f64,
    /// Constant on the `Λ̂` term.
    pub c_const: f64,
    pub noise: NoiseParams,
    pub q: f64,
    pub n: usize,
    pub p: usize,
    /// Produce weights even when an assumption fails (recorded in the report).
    pub force: bool,
}

impl WeightParams {
    pub fn new(n: usize, p: usize, q: f64, noise: NoiseParams) -> Self {
        WeightParams {
            theta: default_theta(p),
            c_const: C_PROVABLE,
            noise,
            q,
            n,
            p,
            force: false,
        }
    }

    pub fn for_matrix(a: &PoolingMatrix, noise: NoiseParams) -> Self {
        Self::new(a.n(), a.p(), a.q(), noise)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_c(mut self, c_const: f64) -> Self {
        self.c_const = c_const;
        self
    }

    pub fn forced(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn kappa(&self) -> f64 {
        self.noise.kappa()
    }

    fn m_q(&self) -> f64 {
        self.q.max(1.0 - self.q)
    }

    /// `nq − C_{n,θ}`.
    pub fn lambda_denominator(&self) -> f64 {
        self.n as f64 * self.q - c_n_theta(self.n, self.q, self.theta)
    }

    /// `1 − κ sqrt(2 g(θ))`, positive exactly when A3 holds.
    pub fn a3_margin(&self) -> Result<f64> {
        Ok(1.0 - self.kappa() * (2.0 * g_theta(self.theta, self.n)?).sqrt())
    }

    /// `c (θ/n + max(q², (1−q)²) θ² / (n² q(1−q)))`, the multiplier of `Λ̂`.
    pub fn lambda_coefficient(&self) -> f64 {
        let n = self.n as f64;
        let q = self.q;
        let m2 = (q * q).max((1.0 - q) * (1.0 - q));
        self.c_const * (self.theta / n + m2 * self.theta * self.theta / (n * n * q * (1.0 - q)))
    }

    /// `κ sqrt(2θ) / (1 − κ sqrt(2 g(θ)))`, the multiplier of `sqrt(rᵀ y²)`.
    pub fn noise_factor(&self) -> Result<f64> {
        let margin = self.a3_margin()?;
        Ok(self.kappa() * (2.0 * self.theta).sqrt() / margin)
    }

    fn check_shapes(&self, a: &PoolingMatrix, y: &DenseVector) -> Result<()> {
        if a.n() != self.n || a.p() != self.p || a.q() != self.q || y.len() != self.n {
            return Err(param(format!(
                "weight parameters (n={}, p={}, q={}) do not match design (n={}, p={}, q={}) and {} measurements",
                self.n,
                self.p,
                self.q,
                a.n(),
                a.p(),
                a.q(),
                y.len()
            )));
        }
        Ok(())
    }
}

pub fn default_theta(p: usize) -> f64 {
    3.0 * (p as f64).ln()
}

/// Outcome of one assumption check; `margin >= 0` (or `> 0` for strict
/// inequalities) means it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub margin: f64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    /// Advisory remarks that do not gate anything.
    pub notes: Vec<String>,
    /// Set when weights were produced despite a failing check.
    pub forced: bool,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<8} {}  margin {:<12.6}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.margin,
                c.message
            )?;
        }
        for n in &self.notes {
            writeln!(f, "note     {n}")?;
        }
        if self.forced {
            writeln!(f, "note     weights produced with failing assumptions (forced)")?;
        }
        Ok(())
    }
}

/// Evaluates A1 (`nq ≥ 4 max(q,1−q) θ`, i.e. `12 max(q,1−q) ln p` at the
/// production θ), A2 (`p ≥ 2`), A3 (`κ sqrt(2 g(θ)) < 1`), the `c = 126`
/// proviso `n ≥ 20`, and positivity of the `Λ̂` denominator. Never fails.
pub fn check_assumptions(params: &WeightParams) -> AssumptionReport {
    let n = params.n as f64;
    let q = params.q;
    let theta = params.theta;
    let mut checks = Vec::with_capacity(5);

    let a1_rhs = 4.0 * params.m_q() * theta;
    let a1 = n * q - a1_rhs;
    checks.push(AssumptionCheck {
        name: "A1",
        passed: a1 >= 0.0,
        margin: a1,
        message: format!("nq = {} vs 4 max(q,1-q) theta = {}", n * q, a1_rhs),
    });

    checks.push(AssumptionCheck {
        name: "A2",
        passed: params.p >= 2,
        margin: params.p as f64 - 2.0,
        message: format!("p = {}", params.p),
    });

    let (a3, a3_msg) = match g_theta(theta, params.n) {
        Ok(g) => {
            let lhs = params.kappa() * (2.0 * g).sqrt();
            (1.0 - lhs, format!("kappa sqrt(2 g(theta)) = {lhs} must be < 1"))
        }
        Err(e) => (f64::NEG_INFINITY, e.to_string()),
    };
    checks.push(AssumptionCheck {
        name: "A3",
        passed: a3 > 0.0,
        margin: a3,
        message: a3_msg,
    });

    let provable = params.c_const != C_PROVABLE || params.n >= 20;
    checks.push(AssumptionCheck {
        name: "C126",
        passed: provable,
        margin: if params.c_const == C_PROVABLE { n - 20.0 } else { 0.0 },
        message: format!("c = {} with n = {}", params.c_const, params.n),
    });

    let denom = params.lambda_denominator();
    checks.push(AssumptionCheck {
        name: "LAMBDA",
        passed: denom > 0.0,
        margin: denom,
        message: format!("Lambda-hat denominator nq - C(n,theta) = {denom}"),
    });

    let mut notes = Vec::new();
    if let Some(w) = params.noise.sigma_warning() {
        notes.push(w);
    }
    if !(theta > 1.0) {
        notes.push(format!("theta = {theta} is below the proven range theta > 1"));
    }
    AssumptionReport {
        checks,
        notes,
        forced: false,
    }
}

/// High-probability over-estimate of `‖x*‖₁`:
/// `[Σy + sqrt(Σy²) κ sqrt(2θ)/(1 − κ sqrt(2g(θ)))] / (nq − C_{n,θ})`.
pub fn lambda_hat(y: &DenseVector, params: &WeightParams) -> Result<f64> {
    let denom = params.lambda_denominator();
    if !(denom > 0.0) {
        return Err(Error::Assumption {
            name: "A1",
            detail: format!("Lambda-hat denominator nq - C(n,theta) = {denom} is not positive"),
        });
    }
    let margin = params.a3_margin()?;
    if !(margin > 0.0) {
        return Err(Error::Assumption {
            name: "A3",
            detail: format!("1 - kappa sqrt(2 g(theta)) = {margin} is not positive"),
        });
    }
    let sum = y.sum();
    let root = y.dot(y).sqrt();
    let noise = params.kappa() * (2.0 * params.theta).sqrt() / margin;
    Ok((sum + root * noise) / denom)
}

/// `R` (pools × samples) and its elementwise square `R̄`.
#[derive(Clone, Debug)]
pub struct RMatrices {
    pub r: DenseMatrix,
    pub r_bar: DenseMatrix,
}

pub fn r_matrices(a: &PoolingMatrix) -> Result<RMatrices> {
    let n = a.n();
    if n < 2 {
        return Err(param(format!("R needs at least two pools, got {n}")));
    }
    let q = a.q();
    let nf = n as f64;
    let denom = nf * (nf - 1.0) * q * (1.0 - q);
    let colsum = a.column_sums();
    let mut r = a.matrix().clone();
    for (mut col, &c) in r.axis_iter_mut(Axis(1)).zip(colsum.iter()) {
        col.mapv_inplace(|v| (nf * v - c) / denom);
    }
    let r_bar = r.mapv(|v| v * v);
    Ok(RMatrices { r, r_bar })
}

/// `W = max_{k,m} (R̄ᵀA)_{k,m}`.
pub fn w_statistic(a: &PoolingMatrix, rm: &RMatrices) -> f64 {
    rm.r_bar
        .t()
        .dot(a.matrix())
        .iter()
        .fold(0.0f64, |m, &v| m.max(v))
}

/// `Ãᵀ(ỹ − Ã x*)`: the gradient the weights have to dominate coordinatewise.
pub fn gradient_at_truth(
    a_tilde: &DenseMatrix,
    y_tilde: &DenseVector,
    x_star: &DenseVector,
) -> DenseVector {
    let residual = y_tilde - &a_tilde.dot(x_star);
    a_tilde.t().dot(&residual)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    /// One weight shared by every coordinate (LASSO).
    Uniform(f64),
    /// One weight per coordinate (weighted LASSO).
    PerCoordinate(DenseVector),
}

/// A set of weights together with the diagnostics used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub weights: Weights,
    /// `Λ̂`; `None` when forced past an unusable denominator.
    pub lambda_hat: Option<f64>,
    /// `W`, only needed for the uniform weight.
    pub w_stat: Option<f64>,
    pub theta: f64,
    pub c_const: f64,
    pub kappa: f64,
    pub report: AssumptionReport,
}

impl WeightSet {
    pub fn kind(&self) -> &'static str {
        match self.weights {
            Weights::Uniform(_) => "uniform",
            Weights::PerCoordinate(_) => "per-coordinate",
        }
    }

    /// Weights expanded to one entry per coordinate.
    pub fn expand(&self, p: usize) -> DenseVector {
        match &self.weights {
            Weights::Uniform(b) => Array1::from_elem(p, *b),
            Weights::PerCoordinate(v) => v.clone(),
        }
    }

    /// Multiplies every weight by `alpha` (the diagnostics are left as is).
    pub fn scaled(&self, alpha: f64) -> WeightSet {
        let mut out = self.clone();
        out.weights = match &self.weights {
            Weights::Uniform(b) => Weights::Uniform(b * alpha),
            Weights::PerCoordinate(v) => Weights::PerCoordinate(v * alpha),
        };
        out
    }

    pub fn header_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("kind = {}", self.kind()),
            format!("theta = {}", self.theta),
            format!("c = {}", self.c_const),
            format!("kappa = {}", self.kappa),
            format!(
                "lambda_hat = {}",
                self.lambda_hat.map_or("NA".to_string(), |v| v.to_string())
            ),
        ];
        if let Some(w) = self.w_stat {
            lines.push(format!("W = {w}"));
        }
        lines.extend(
            self.report
                .to_string()
                .lines()
                .map(|l| format!("assumption {l}")),
        );
        lines
    }
}

/// Shared pieces of both weight choices for one `(A, y)` pair.
pub struct WeightContext<'a> {
    a: &'a PoolingMatrix,
    y: DenseVector,
    params: WeightParams,
    rm: RMatrices,
    lambda_hat: std::result::Result<f64, (&'static str, String)>,
    report: AssumptionReport,
}

impl<'a> WeightContext<'a> {
    /// Checks assumptions and evaluates `Λ̂` and `R`. Fails on an assumption
    /// failure unless `params.force` is set. When forced, an unusable `Λ̂`
    /// (nonpositive denominator, A3 violated) only blocks the weights that
    /// depend on it.
    pub fn new(a: &'a PoolingMatrix, y: &DenseVector, params: &WeightParams) -> Result<Self> {
        params.check_shapes(a, y)?;
        let mut report = check_assumptions(params);
        let first = report.failures().next().map(|c| (c.name, c.message.clone()));
        if let Some((name, detail)) = first {
            if !params.force {
                return Err(Error::Assumption { name, detail });
            }
            report.forced = true;
        }
        let lambda_hat = match lambda_hat(y, params) {
            Ok(v) => Ok(v),
            Err(Error::Assumption { name, detail }) if params.force => Err((name, detail)),
            Err(e) => return Err(e),
        };
        let rm = r_matrices(a)?;
        Ok(WeightContext {
            a,
            y: y.clone(),
            params: params.clone(),
            rm,
            lambda_hat,
            report,
        })
    }

    /// `Λ̂`, or `None` when it could not be formed (forced mode only).
    pub fn lambda_hat(&self) -> Option<f64> {
        self.lambda_hat.as_ref().ok().copied()
    }

    fn require_lambda(&self) -> Result<f64> {
        self.lambda_hat.clone().map_err(|(name, detail)| Error::Assumption { name, detail })
    }

    pub fn r_matrices(&self) -> &RMatrices {
        &self.rm
    }

    pub fn report(&self) -> &AssumptionReport {
        &self.report
    }

    fn set(&self, weights: Weights, w_stat: Option<f64>) -> WeightSet {
        WeightSet {
            weights,
            lambda_hat: self.lambda_hat(),
            w_stat,
            theta: self.params.theta,
            c_const: self.params.c_const,
            kappa: self.params.kappa(),
            report: self.report.clone(),
        }
    }

    /// `β = κ Λ̂ sqrt(2θW) + c(θ/n + max(q²,(1−q)²)θ²/(n²q(1−q))) Λ̂`.
    pub fn lasso(&self) -> Result<WeightSet> {
        let lam = self.require_lambda()?;
        let w = w_statistic(self.a, &self.rm);
        let p = &self.params;
        let beta = p.kappa() * lam * (2.0 * p.theta * w).sqrt() + p.lambda_coefficient() * lam;
        Ok(self.set(Weights::Uniform(beta), Some(w)))
    }

    /// `β_k = sqrt(R̄_kᵀ y²) κ sqrt(2θ)/(1 − κ sqrt(2g(θ))) + c(...) Λ̂`.
    /// With `c = 0` the weights do not involve `Λ̂`.
    pub fn wlasso(&self) -> Result<WeightSet> {
        let p = &self.params;
        let noise = p.noise_factor()?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Assumption {
                name: "A3",
                detail: format!("noise factor {noise} is not usable"),
            });
        }
        let shared = if p.c_const == 0.0 {
            0.0
        } else {
            p.lambda_coefficient() * self.require_lambda()?
        };
        let y2 = self.y.mapv(|v| v * v);
        let proj = self.rm.r_bar.t().dot(&y2);
        let betas = proj.mapv(|v| v.max(0.0).sqrt() * noise + shared);
        Ok(self.set(Weights::PerCoordinate(betas), None))
    }
}

/// Uniform LASSO weight.
pub fn beta_lasso(a: &PoolingMatrix, y: &DenseVector, params: &WeightParams) -> Result<WeightSet> {
    WeightContext::new(a, y, params)?.lasso()
}

/// Per-coordinate weighted-LASSO weights.
pub fn beta_wlasso(a: &PoolingMatrix, y: &DenseVector, params: &WeightParams) -> Result<WeightSet> {
    WeightContext::new(a, y, params)?.wlasso()
}
