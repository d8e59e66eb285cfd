//! Bernoulli pooling designs and the surrogate (recentred, rescaled) system.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::distr::Distribution;

use crate::error::{io_err, param, Error, Result};
use crate::numerics::{bernoulli_dist, DenseMatrix, DenseVector, RngStream};

/// Binary pool-membership matrix: `a[[l, k]] == 1` iff sample `k` goes into pool `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingMatrix {
    a: DenseMatrix,
    q: f64,
}

impl PoolingMatrix {
    /// Wraps an existing 0/1 matrix drawn (nominally) with membership probability `q`.
    ///
    /// Any shape is accepted; only generated designs must satisfy `n < p`.
    pub fn from_entries(a: DenseMatrix, q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(param(format!("q = {q} must lie in (0, 1)")));
        }
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(param("pooling matrix must be nonempty"));
        }
        if let Some(bad) = a.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(param(format!("pooling matrix entry {bad} is not 0 or 1")));
        }
        Ok(PoolingMatrix { a, q })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Number of pools.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Number of samples.
    pub fn p(&self) -> usize {
        self.a.ncols()
    }

    /// Per-sample pool counts (column sums).
    pub fn column_sums(&self) -> DenseVector {
        self.a.sum_axis(Axis(0))
    }

    /// Per-pool sample counts (row sums).
    pub fn row_sums(&self) -> DenseVector {
        self.a.sum_axis(Axis(1))
    }

    /// Pooled loads `A x`.
    pub fn apply(&self, x: &DenseVector) -> DenseVector {
        self.a.dot(x)
    }

    /// Plain-text form: `n p q` then one row of space-separated 0/1 digits per pool.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.n() * (2 * self.p() + 1) + 32);
        let _ = writeln!(out, "{} {} {}", self.n(), self.p(), self.q);
        for row in self.a.rows() {
            let mut first = true;
            for &v in row {
                if !first {
                    out.push(' ');
                }
                out.push(if v == 1.0 { '1' } else { '0' });
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty input")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!("header must be `n p q`, got `{header}`"));
        }
        let n: usize = fields[0].parse().map_err(|e| format!("bad n: {e}"))?;
        let p: usize = fields[1].parse().map_err(|e| format!("bad p: {e}"))?;
        let q: f64 = fields[2].parse().map_err(|e| format!("bad q: {e}"))?;
        let mut a = Array2::zeros((n, p));
        for l in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| format!("expected {n} rows, found {l}"))?;
            let mut count = 0;
            for (k, tok) in line.split_whitespace().enumerate() {
                if k >= p {
                    return Err(format!("row {l} has more than {p} entries"));
                }
                a[[l, k]] = match tok {
                    "0" => 0.0,
                    "1" => 1.0,
                    other => return Err(format!("row {l}: entry `{other}` is not 0 or 1")),
                };
                count += 1;
            }
            if count != p {
                return Err(format!("row {l} has {count} entries, expected {p}"));
            }
        }
        if lines.next().is_some() {
            return Err(format!("more than {n} rows"));
        }
        PoolingMatrix::from_entries(a, q).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text).map_err(|detail| Error::Parse {
            path: path.to_path_buf(),
            detail,
        })
    }
}

/// Draws an `n x p` matrix with i.i.d. Bernoulli(q) entries, row by row.
///
/// Degenerate draws (empty pools, samples in fewer than two pools) are kept;
/// use [`validate_pooling`] to detect them.
pub fn generate_pooling_matrix(
    n: usize,
    p: usize,
    q: f64,
    stream: &mut RngStream,
) -> Result<PoolingMatrix> {
    if n < 2 || p < 2 || n >= p {
        return Err(param(format!(
            "pooling design needs 2 <= n < p, got n = {n}, p = {p}"
        )));
    }
    let dist = bernoulli_dist(q)?;
    let rng = stream.rng();
    let a = Array2::from_shape_simple_fn((n, p), || if dist.sample(rng) { 1.0 } else { 0.0 });
    Ok(PoolingMatrix { a, q })
}

fn scale(n: usize, q: f64) -> f64 {
    (n as f64 * q * (1.0 - q)).sqrt()
}

/// `Ã[l, k] = (A[l, k] - q) / sqrt(n q (1 - q))`.
pub fn surrogate_matrix(a: &PoolingMatrix) -> DenseMatrix {
    let q = a.q;
    let s = scale(a.n(), q);
    a.a.mapv(|v| (v - q) / s)
}

/// `ỹ_j = (n y_j - Σ_l y_l) / ((n - 1) sqrt(n q (1 - q)))`.
pub fn surrogate_measurements(y: &DenseVector, n: usize, q: f64) -> Result<DenseVector> {
    if n < 2 || y.len() != n {
        return Err(param(format!(
            "surrogate measurements need n = len(y) >= 2, got n = {n}, len = {}",
            y.len()
        )));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(param(format!("q = {q} must lie in (0, 1)")));
    }
    let total = y.sum();
    let denom = (n as f64 - 1.0) * scale(n, q);
    Ok(y.mapv(|v| (n as f64 * v - total) / denom))
}

/// The pair `(Ã, ỹ)` the estimators are solved on.
#[derive(Clone, Debug)]
pub struct SurrogateSystem {
    pub a_tilde: DenseMatrix,
    pub y_tilde: DenseVector,
    pub source_q: f64,
}

impl SurrogateSystem {
    pub fn build(a: &PoolingMatrix, y: &DenseVector) -> Result<Self> {
        Ok(SurrogateSystem {
            a_tilde: surrogate_matrix(a),
            y_tilde: surrogate_measurements(y, a.n(), a.q)?,
            source_q: a.q,
        })
    }
}

/// Restricted-eigenvalue parameters of the surrogate matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub c_rec: f64,
}

/// `κ₁ = c_rec / (q(1-q)) · sqrt(ln p / n)`, `κ₂ = 1/4`.
pub fn rec_parameters(n: usize, p: usize, q: f64, c_rec: f64) -> Result<RecParams> {
    rec_parameters_real(n as f64, p, q, c_rec)
}

/// As [`rec_parameters`] with a real-valued pool count.
pub fn rec_parameters_real(n: f64, p: usize, q: f64, c_rec: f64) -> Result<RecParams> {
    if p < 2 || !(n >= 1.0) || !(c_rec > 0.0) || !(q > 0.0 && q < 1.0) {
        return Err(param(format!(
            "REC parameters need p >= 2, n >= 1, c_rec > 0, q in (0,1); got p = {p}, n = {n}, c_rec = {c_rec}, q = {q}"
        )));
    }
    let kappa1 = c_rec / (q * (1.0 - q)) * ((p as f64).ln() / n).sqrt();
    Ok(RecParams {
        kappa1,
        kappa2: 0.25,
        c_rec,
    })
}

/// Structural problems found in a pooling design.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PoolingReport {
    /// Pools with no samples (all-zero rows).
    pub empty_pools: Vec<usize>,
    /// Samples that appear in fewer than two pools.
    pub undercovered_samples: Vec<usize>,
    /// `n < p`.
    pub compressive: bool,
}

impl PoolingReport {
    pub fn warning_count(&self) -> usize {
        self.empty_pools.len() + self.undercovered_samples.len()
    }

    pub fn is_clean(&self) -> bool {
        self.warning_count() == 0
    }

    pub fn messages(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.empty_pools {
            out.push(format!("pool {l} is empty"));
        }
        for k in &self.undercovered_samples {
            out.push(format!("sample {k} appears in fewer than 2 pools"));
        }
        out
    }
}

pub fn validate_pooling(a: &PoolingMatrix) -> PoolingReport {
    let rows: Array1<f64> = a.row_sums();
    let cols: Array1<f64> = a.column_sums();
    PoolingReport {
        empty_pools: rows
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0.0)
            .map(|(l, _)| l)
            .collect(),
        undercovered_samples: cols
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < 2.0)
            .map(|(k, _)| k)
            .collect(),
        compressive: a.n() < a.p(),
    }
}
