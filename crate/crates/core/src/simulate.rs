//! Ground-truth viral loads and noisy pooled measurements.

use std::path::Path;

use ndarray::Array1;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, param, Error, Result};
use crate::numerics::{sample_standard_normal, DenseVector, RngStream};
use crate::pooling::PoolingMatrix;

/// Shape of a simulated viral-load vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub p: usize,
    /// Fraction of infected samples.
    pub f_s: f64,
    /// Loads of infected samples.
    pub hi_range: (f64, f64),
    /// Background loads of healthy samples.
    pub lo_range: (f64, f64),
}

impl SignalSpec {
    pub fn new(p: usize, f_s: f64) -> Self {
        SignalSpec {
            p,
            f_s,
            hi_range: (1.0, 1000.0),
            lo_range: (0.0, 0.2),
        }
    }

    /// Number of significant entries, `round(f_s · p)` with halves rounded up.
    pub fn sparsity(&self) -> usize {
        (self.f_s * self.p as f64 + 0.5).floor() as usize
    }

    fn check(&self) -> Result<()> {
        if self.p == 0 {
            return Err(param("signal length p must be positive"));
        }
        if !(self.f_s >= 0.0 && self.f_s < 1.0) {
            return Err(param(format!("f_s = {} must lie in [0, 1)", self.f_s)));
        }
        let (hl, hh) = self.hi_range;
        let (ll, lh) = self.lo_range;
        if !(hl <= hh && ll <= lh && ll >= 0.0) {
            return Err(param("load ranges must be nonnegative intervals"));
        }
        if !(hl > lh) {
            return Err(param(format!(
                "significant loads [{hl}, {hh}] must lie above background [{ll}, {lh}]"
            )));
        }
        Ok(())
    }
}

/// Multiplicative noise parameters: cycle-time noise `σ` and amplification `q_a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub q_a: f64,
}

impl NoiseParams {
    pub fn new(sigma: f64, q_a: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(param(format!("sigma = {sigma} must be a finite nonnegative number")));
        }
        if !(q_a > 0.0 && q_a <= 1.0) {
            return Err(param(format!("q_a = {q_a} must lie in (0, 1]")));
        }
        Ok(NoiseParams { sigma, q_a })
    }

    /// `κ = σ ln(1 + q_a)`.
    pub fn kappa(&self) -> f64 {
        self.sigma * self.q_a.ln_1p()
    }

    /// The linearised model is only trusted for `σ < 1`.
    pub fn sigma_warning(&self) -> Option<String> {
        (self.sigma >= 1.0)
            .then(|| format!("sigma = {} is outside the low-variance regime sigma < 1", self.sigma))
    }
}

/// Which measurement model generated `y`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// `y_j = (Ax)_j (1 + q_a)^{w_j}`.
    #[default]
    Exact,
    /// First-order expansion `y_j = (Ax)_j (1 + ln(1 + q_a) w_j)`.
    Linearized,
}

impl NoiseModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseModel::Exact => "exact",
            NoiseModel::Linearized => "linearized",
        }
    }
}

/// Simulated viral loads and their significant support.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub x_star: DenseVector,
    /// Sorted indices of the significant entries.
    pub support: Vec<usize>,
    pub s: usize,
}

impl GroundTruth {
    pub fn l1_norm(&self) -> f64 {
        self.x_star.iter().map(|v| v.abs()).sum()
    }

    /// Same support, loads multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> GroundTruth {
        GroundTruth {
            x_star: &self.x_star * alpha,
            support: self.support.clone(),
            s: self.s,
        }
    }
}

/// Picks `round(f_s p)` infected samples uniformly without replacement and
/// draws their loads from `hi_range`; every other entry comes from `lo_range`.
pub fn generate_signal(spec: &SignalSpec, stream: &mut RngStream) -> Result<GroundTruth> {
    spec.check()?;
    let s = spec.sparsity();
    let mut support = index::sample(stream.rng(), spec.p, s).into_vec();
    support.sort_unstable();
    let mut infected = vec![false; spec.p];
    for &k in &support {
        infected[k] = true;
    }
    let x_star = Array1::from_iter(infected.iter().map(|&hit| {
        let (lo, hi) = if hit { spec.hi_range } else { spec.lo_range };
        stream.uniform(lo, hi)
    }));
    Ok(GroundTruth { x_star, support, s })
}

fn pooled_loads(a: &PoolingMatrix, x: &DenseVector) -> Result<DenseVector> {
    if x.len() != a.p() {
        return Err(param(format!(
            "signal length {} does not match the {} samples of the design",
            x.len(),
            a.p()
        )));
    }
    if let Some(bad) = x.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(param(format!("viral load {bad} is not a finite nonnegative value")));
    }
    Ok(a.apply(x))
}

/// Exact multiplicative model. One normal draw per pool is consumed even
/// when `σ = 0`, so both models stay paired on a shared stream.
pub fn measure_exact(
    a: &PoolingMatrix,
    x: &DenseVector,
    noise: &NoiseParams,
    stream: &mut RngStream,
) -> Result<DenseVector> {
    let ax = pooled_loads(a, x)?;
    let kappa = noise.kappa();
    Ok(ax.mapv(|v| v * (kappa * sample_standard_normal(stream)).exp()))
}

/// Linearised model; entries can go negative for extreme draws (`w < -1/ln(1+q_a)`).
pub fn measure_linearized(
    a: &PoolingMatrix,
    x: &DenseVector,
    noise: &NoiseParams,
    stream: &mut RngStream,
) -> Result<DenseVector> {
    let ax = pooled_loads(a, x)?;
    let kappa = noise.kappa();
    Ok(ax.mapv(|v| v + v * kappa * sample_standard_normal(stream)))
}

pub fn measure(
    model: NoiseModel,
    a: &PoolingMatrix,
    x: &DenseVector,
    noise: &NoiseParams,
    stream: &mut RngStream,
) -> Result<DenseVector> {
    match model {
        NoiseModel::Exact => measure_exact(a, x, noise, stream),
        NoiseModel::Linearized => measure_linearized(a, x, noise, stream),
    }
}

/// One value per line, optional `#` comment lines first.
pub fn vector_to_text(header: &[String], v: &DenseVector) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    for x in v {
        out.push_str(&format!("{x}\n"));
    }
    out
}

pub fn vector_from_text(text: &str) -> std::result::Result<DenseVector, String> {
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|e| format!("line {}: `{t}`: {e}", i + 1))?;
        if !v.is_finite() {
            return Err(format!("line {}: non-finite value", i + 1));
        }
        values.push(v);
    }
    Ok(Array1::from(values))
}

pub fn write_vector(path: &Path, header: &[String], v: &DenseVector) -> Result<()> {
    std::fs::write(path, vector_to_text(header, v)).map_err(io_err(path))
}

pub fn read_vector(path: &Path) -> Result<DenseVector> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    vector_from_text(&text).map_err(|detail| Error::Parse {
        path: path.to_path_buf(),
        detail,
    })
}
