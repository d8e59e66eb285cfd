//! Weighted LASSO on the surrogate system,
//! `min_x ‖ỹ − Ãx‖₂² + γ Σ_k β_k |x_k|`,
//! solved by FISTA and by cyclic coordinate descent, with a subgradient
//! (KKT) residual as the optimality certificate.

use std::borrow::Cow;

use ndarray::{Array1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::numerics::{spectral_norm_sq, DenseMatrix, DenseVector};
use crate::weights::WeightSet;

/// `sign(v) max(|v| − t, 0)`; exactly 0 when `|v| = t`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct LassoProblem<'a> {
    a_tilde: &'a DenseMatrix,
    y_tilde: &'a DenseVector,
    beta: DenseVector,
    gamma: f64,
    gram: Option<Cow<'a, DenseMatrix>>,
}

impl<'a> LassoProblem<'a> {
    pub fn new(
        a_tilde: &'a DenseMatrix,
        y_tilde: &'a DenseVector,
        weights: &WeightSet,
        gamma: f64,
    ) -> Result<Self> {
        Self::with_penalties(a_tilde, y_tilde, weights.expand(a_tilde.ncols()), gamma)
    }

    /// Problem with explicit per-coordinate weights `β_k`.
    pub fn with_penalties(
        a_tilde: &'a DenseMatrix,
        y_tilde: &'a DenseVector,
        beta: DenseVector,
        gamma: f64,
    ) -> Result<Self> {
        let (n, p) = a_tilde.dim();
        if n == 0 || p == 0 {
            return Err(param("empty design matrix"));
        }
        if y_tilde.len() != n || beta.len() != p {
            return Err(param(format!(
                "shape mismatch: A is {n}x{p}, y has {}, weights have {}",
                y_tilde.len(),
                beta.len()
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(param(format!("gamma = {gamma} must be finite and nonnegative")));
        }
        if beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(param("weights must be finite and nonnegative"));
        }
        Ok(LassoProblem {
            a_tilde,
            y_tilde,
            beta,
            gamma,
            gram: None,
        })
    }

    /// Supplies a precomputed `ÃᵀÃ`, shared across solves on the same design.
    pub fn with_gram(mut self, gram: &'a DenseMatrix) -> Result<Self> {
        let p = self.p();
        if gram.dim() != (p, p) {
            return Err(param(format!("Gram matrix must be {p}x{p}")));
        }
        self.gram = Some(Cow::Borrowed(gram));
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a_tilde.nrows()
    }

    pub fn p(&self) -> usize {
        self.a_tilde.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn weights(&self) -> &DenseVector {
        &self.beta
    }

    pub fn a_tilde(&self) -> &DenseMatrix {
        self.a_tilde
    }

    pub fn y_tilde(&self) -> &DenseVector {
        self.y_tilde
    }

    /// `γ β_k`.
    pub fn penalties(&self) -> DenseVector {
        &self.beta * self.gamma
    }

    fn gram(&self) -> Cow<'_, DenseMatrix> {
        match &self.gram {
            Some(g) => Cow::Borrowed(g.as_ref()),
            None => Cow::Owned(self.a_tilde.t().dot(self.a_tilde)),
        }
    }

}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fista,
    #[default]
    CoordinateDescent,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Fista => "fista",
            Algorithm::CoordinateDescent => "coordinate_descent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Relative objective change between iterations.
    pub tol_obj: f64,
    /// Absolute KKT residual.
    pub tol_kkt: f64,
    pub nonnegative: bool,
    pub algorithm: Algorithm,
    /// Keep the objective value after every iteration (sweep for CD).
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 50_000,
            tol_obj: 1e-10,
            tol_kkt: 1e-8,
            nonnegative: false,
            algorithm: Algorithm::CoordinateDescent,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_obj > 0.0) || !(self.tol_kkt > 0.0) {
            return Err(param("solver tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(param("max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub x_hat: DenseVector,
    pub iterations: usize,
    pub final_objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// `‖ỹ − Ãx‖₂² + γ Σ β_k |x_k|`.
pub fn objective(problem: &LassoProblem, x: &DenseVector) -> f64 {
    let r = problem.y_tilde - &problem.a_tilde.dot(x);
    let pen: f64 = Zip::from(&problem.beta).and(x).fold(0.0, |s, b, v| s + b * v.abs());
    r.dot(&r) + problem.gamma * pen
}

/// `2Ãᵀ(Ãx − ỹ)`.
fn gradient(problem: &LassoProblem, x: &DenseVector) -> DenseVector {
    let r = problem.a_tilde.dot(x) - problem.y_tilde;
    problem.a_tilde.t().dot(&r) * 2.0
}

fn residual_from_gradient(g: &DenseVector, x: &DenseVector, pen: &DenseVector, nonnegative: bool) -> f64 {
    let mut worst = 0.0f64;
    for ((&gk, &xk), &tk) in g.iter().zip(x.iter()).zip(pen.iter()) {
        let r = if nonnegative {
            if xk < 0.0 {
                f64::INFINITY
            } else if xk > 0.0 {
                (gk + tk).abs()
            } else {
                (-(gk + tk)).max(0.0)
            }
        } else if xk > 0.0 {
            (gk + tk).abs()
        } else if xk < 0.0 {
            (gk - tk).abs()
        } else {
            (gk.abs() - tk).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

/// Largest violation of the subgradient optimality conditions, with
/// `g = 2Ãᵀ(Ãx − ỹ)`: `|g_k + γβ_k sign(x_k)|` off zero, `max(|g_k| − γβ_k, 0)` at zero.
pub fn kkt_residual(problem: &LassoProblem, x: &DenseVector) -> f64 {
    kkt_residual_constrained(problem, x, false)
}

/// As [`kkt_residual`]; with `nonnegative` the zero coordinates use the
/// one-sided condition `g_k + γβ_k ≥ 0` and negative entries are infeasible.
pub fn kkt_residual_constrained(problem: &LassoProblem, x: &DenseVector, nonnegative: bool) -> f64 {
    residual_from_gradient(&gradient(problem, x), x, &problem.penalties(), nonnegative)
}

fn relative_change(prev: f64, next: f64) -> f64 {
    (prev - next).abs() / next.abs().max(f64::MIN_POSITIVE)
}

fn prox(v: f64, t: f64, nonnegative: bool) -> f64 {
    if nonnegative {
        (v - t).max(0.0)
    } else {
        soft_threshold(v, t)
    }
}

/// Accelerated proximal gradient with step `1/L`, `L = 2‖Ã‖₂²`, and
/// function-value restart.
pub fn solve_fista(problem: &LassoProblem, config: &SolverConfig) -> Result<SolverResult> {
    config.validate()?;
    let p = problem.p();
    let lip = 2.0
        * match spectral_norm_sq(problem.a_tilde, 1e-10, 100_000) {
            Ok(v) => v,
            // Frobenius norm bounds the spectral norm from above.
            Err(Error::Convergence { .. }) => problem.a_tilde.iter().map(|v| v * v).sum(),
            Err(e) => return Err(e),
        };
    let pen = problem.penalties();
    let zero = Array1::zeros(p);
    if lip == 0.0 {
        return Ok(finish(problem, zero, 0, true, config, Vec::new()));
    }
    let step_pen = &pen / lip;

    let mut x = zero.clone();
    let mut z = zero;
    let mut t = 1.0f64;
    let mut f = objective(problem, &x);
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(f);
    }
    for it in 1..=config.max_iter {
        let g = gradient(problem, &z);
        let mut x_next = Array1::zeros(p);
        Zip::from(&mut x_next)
            .and(&z)
            .and(&g)
            .and(&step_pen)
            .for_each(|xn, &zk, &gk, &tk| *xn = prox(zk - gk / lip, tk, config.nonnegative));
        let f_next = objective(problem, &x_next);
        if f_next > f && t > 1.0 {
            // restart from the last iterate without momentum
            t = 1.0;
            z = x.clone();
            if config.record_trace {
                trace.push(f);
            }
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &x_next + &((&x_next - &x) * ((t - 1.0) / t_next));
        t = t_next;
        let change = relative_change(f, f_next);
        x = x_next;
        f = f_next;
        if config.record_trace {
            trace.push(f);
        }
        if change <= config.tol_obj
            && kkt_residual_constrained(problem, &x, config.nonnegative) <= config.tol_kkt
        {
            return Ok(finish(problem, x, it, true, config, trace));
        }
    }
    Ok(finish(problem, x, config.max_iter, false, config, trace))
}

/// Cyclic coordinate descent on the Gram form. Each update is the exact
/// minimiser `soft(ρ_k, γβ_k/2) / ‖Ã_k‖²` with `ρ_k = Ã_kᵀ(ỹ − Ãx) + ‖Ã_k‖² x_k`.
pub fn solve_coordinate_descent(problem: &LassoProblem, config: &SolverConfig) -> Result<SolverResult> {
    config.validate()?;
    let p = problem.p();
    let gram = problem.gram();
    let b = problem.a_tilde.t().dot(problem.y_tilde);
    let yy = problem.y_tilde.dot(problem.y_tilde);
    let half_pen = problem.penalties() * 0.5;
    let diag = gram.diag().to_owned();

    let mut x: DenseVector = Array1::zeros(p);
    // c = Ãᵀỹ − ÃᵀÃx
    let mut c = b.clone();
    let value = |x: &DenseVector, c: &DenseVector| {
        let pen: f64 = Zip::from(&problem.beta).and(x).fold(0.0, |s, bk, v| s + bk * v.abs());
        // ‖ỹ − Ãx‖² = ‖ỹ‖² − xᵀb − xᵀc
        (yy - x.dot(&b) - x.dot(c)).max(0.0) + problem.gamma * pen
    };
    let mut f = yy;
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(f);
    }
    for sweep in 1..=config.max_iter {
        for k in 0..p {
            let d = diag[k];
            let old = x[k];
            let new = if d > 0.0 {
                prox(c[k] + d * old, half_pen[k], config.nonnegative) / d
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                x[k] = new;
                c.scaled_add(-delta, &gram.column(k));
            }
        }
        let f_next = value(&x, &c);
        let change = relative_change(f, f_next);
        f = f_next;
        if config.record_trace {
            trace.push(f);
        }
        if change <= config.tol_obj {
            // refresh the running gradient to shed accumulated rounding
            c = &b - &gram.dot(&x);
            if kkt_residual_constrained(problem, &x, config.nonnegative) <= config.tol_kkt {
                return Ok(finish(problem, x, sweep, true, config, trace));
            }
        }
    }
    Ok(finish(problem, x, config.max_iter, false, config, trace))
}

fn finish(
    problem: &LassoProblem,
    x: DenseVector,
    iterations: usize,
    converged: bool,
    config: &SolverConfig,
    objective_trace: Vec<f64>,
) -> SolverResult {
    SolverResult {
        final_objective: objective(problem, &x),
        kkt_residual: kkt_residual_constrained(problem, &x, config.nonnegative),
        x_hat: x,
        iterations,
        converged,
        objective_trace,
    }
}

/// Dispatches on `config.algorithm`.
pub fn solve(problem: &LassoProblem, config: &SolverConfig) -> Result<SolverResult> {
    match config.algorithm {
        Algorithm::Fista => solve_fista(problem, config),
        Algorithm::CoordinateDescent => solve_coordinate_descent(problem, config),
    }
}
