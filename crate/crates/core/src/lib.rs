//! Pooled RT-PCR group testing as compressed sensing under multiplicative
//! lognormal noise.
//!
//! The crate simulates Bernoulli pooling designs and noisy pooled viral-load
//! measurements, builds the recentred/rescaled surrogate system, computes the
//! data-dependent LASSO and weighted-LASSO regularisation weights, solves the
//! resulting problems with two independent solvers, and validates the
//! probabilistic guarantees behind the weights by Monte-Carlo simulation.
//!
//! Module map:
//!
//! * [`numerics`] seeded random streams and the small dense linear-algebra core
//! * [`pooling`] pooling matrices, the surrogate system and REC parameters
//! * [`simulate`] ground-truth signals and noisy measurements
//! * [`weights`] the data-dependent weights and their assumption checks
//! * [`solver`] FISTA and coordinate-descent solvers with a KKT certificate
//! * [`metrics`] RRMSE, sensitivity and specificity
//! * [`validate`] Monte-Carlo checks of the concentration bounds and trends
//! * [`harness`] experiment configuration, cross-validation, sweeps and CSV output

// NaN-rejecting comparisons are written `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pooling;
pub mod simulate;
pub mod solver;
pub mod validate;
pub mod weights;

pub use error::{Error, Result};
pub use harness::{
    cross_validate_gamma, emit_aggregate_csv, emit_csv, run_sweep, run_trial, CellConfig,
    CellSummary, Estimator, ExperimentConfig, GammaChoice, Preset, SweepTable, TrialOutcome,
    TrialRecord,
};
pub use metrics::{classify, confusion, rrmse, sensitivity, specificity, Confusion};
pub use numerics::{spectral_norm_sq, DenseMatrix, DenseVector, RngStream};
pub use pooling::{
    generate_pooling_matrix, rec_parameters, surrogate_matrix, surrogate_measurements,
    validate_pooling, PoolingMatrix, PoolingReport, RecParams, SurrogateSystem,
};
pub use simulate::{
    generate_signal, measure, measure_exact, measure_linearized, GroundTruth, NoiseModel,
    NoiseParams, SignalSpec,
};
pub use solver::{
    kkt_residual, objective, soft_threshold, solve, solve_coordinate_descent, solve_fista,
    Algorithm, LassoProblem, SolverConfig, SolverResult,
};
pub use weights::{
    beta_lasso, beta_wlasso, c_n_theta, check_assumptions, g_theta, gradient_at_truth,
    lambda_hat, r_matrices, sigma_bound_simplified, w_statistic, AssumptionReport, RMatrices,
    WeightContext, WeightParams, WeightSet, Weights,
};
pub use validate::{
    prop3_bound, rho_gamma, validate_auxiliary, validate_bernstein, validate_c1,
    validate_gaussian_concentration, validate_lambda_hat, validate_surrogate_identities,
    validate_trends, GaussianSetup, Prop3Bound, Prop3Inputs, TailReport,
};

/// Crate version, reported by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
