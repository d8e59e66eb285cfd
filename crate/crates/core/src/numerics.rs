//! Seeded random streams and the dense linear-algebra helpers the rest of the
//! crate builds on.

use ndarray::{Array1, Array2};
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{param, Error, Result};

/// Row-major dense matrix of finite reals.
pub type DenseMatrix = Array2<f64>;
/// Dense vector of finite reals.
pub type DenseVector = Array1<f64>;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit label for a purpose tag such as `"noise"` (FNV-1a).
pub const fn label(tag: &str) -> u64 {
    let bytes = tag.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    h
}

/// A random stream addressed by `(master_seed, stream_path)`.
///
/// The generator state is derived purely from the address, so two streams
/// with the same address replay the same variates and streams with different
/// paths share no state. Child streams are obtained with [`RngStream::derive`].
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, path: &[u64]) -> Self {
        let mut state = splitmix(master_seed ^ 0x5eed_5eed_5eed_5eed);
        for &l in path {
            state = splitmix(state ^ splitmix(l));
        }
        state = splitmix(state ^ path.len() as u64);
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
            let word = splitmix(state.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        RngStream {
            master_seed,
            path: path.to_vec(),
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Fresh stream at `path ++ [label]`; independent of this stream's position.
    pub fn derive(&self, label: u64) -> RngStream {
        let mut path = self.path.clone();
        path.push(label);
        RngStream::new(self.master_seed, &path)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Uniform draw from `[lo, hi)`, or `lo` when the interval is degenerate.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    /// Uniform index in `0..bound`.
    pub fn index(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub(crate) fn bernoulli_dist(q: f64) -> Result<Bernoulli> {
    if !(q > 0.0 && q < 1.0) {
        return Err(param(format!("probability q = {q} must lie in (0, 1)")));
    }
    Bernoulli::new(q).map_err(|e| param(e.to_string()))
}

/// One Bernoulli(q) draw, `q` in the open interval (0, 1).
pub fn sample_bernoulli(stream: &mut RngStream, q: f64) -> Result<u8> {
    let dist = bernoulli_dist(q)?;
    Ok(dist.sample(stream.rng()) as u8)
}

/// One standard normal draw (ziggurat).
pub fn sample_standard_normal(stream: &mut RngStream) -> f64 {
    StandardNormal.sample(stream.rng())
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Largest eigenvalue of `MᵀM` by power iteration from the normalised
/// all-ones vector.
///
/// Stops once the extrapolated distance to the limit (Aitken estimate from
/// two consecutive Rayleigh-quotient increments) drops below `tol` relative.
pub fn spectral_norm_sq(m: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(param("spectral_norm_sq needs a nonempty matrix"));
    }
    if !(tol > 0.0) {
        return Err(param(format!("tolerance {tol} must be positive")));
    }
    let mut v = Array1::from_elem(cols, 1.0 / (cols as f64).sqrt());
    let mut lambda = 0.0;
    let mut prev_step = f64::INFINITY;
    for it in 1..=max_iter {
        let mv = m.dot(&v);
        let u = m.t().dot(&mv);
        let next = mv.dot(&mv);
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            // v lies in the null space; MᵀM = 0 on the Krylov space reached.
            return Ok(0.0);
        }
        v = u / norm;
        let step = (next - lambda).abs();
        lambda = next;
        if it > 2 {
            let ratio = if prev_step > 0.0 { (step / prev_step).min(0.999_999) } else { 0.0 };
            let remaining = step * ratio / (1.0 - ratio);
            if step <= tol * lambda && remaining <= tol * lambda {
                return Ok(lambda);
            }
        }
        prev_step = step;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        estimate: lambda,
        last_iterate: v.to_vec(),
    })
}
