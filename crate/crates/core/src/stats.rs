//! Probability primitives shared by the samplers.
//!
//! All weight arithmetic is carried out in log space. Normalization goes
//! through [`log_sum_exp`], and every stochastic routine takes an explicit
//! [`RngStream`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Jitter ladder applied to covariance factorizations: start at 1e-10 and
/// escalate by a factor of ten up to 1e-6.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// A reproducible random stream.
///
/// Streams are backed by a counter-based ChaCha generator. [`RngStream::derive`]
/// produces a child stream that depends only on the parent's seed, stream id
/// and the tag, never on how much of the parent has been consumed. Work that
/// is split across particles therefore gives the same numbers whatever the
/// thread count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream identified by `tag`.
    pub fn derive(&self, tag: u64) -> Self {
        let seed = self.rng.get_seed();
        let stream = self.rng.get_stream();
        let mut out = [0u8; 32];
        let mut acc = splitmix64(tag ^ stream.rotate_left(17));
        for (i, chunk) in seed.chunks_exact(8).enumerate() {
            let word = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            acc = splitmix64(acc ^ word ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            out[i * 8..(i + 1) * 8].copy_from_slice(&acc.to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(out),
        }
    }

    /// Shorthand for a two-level derivation, e.g. `(step, particle)`.
    pub fn derive2(&self, a: u64, b: u64) -> Self {
        self.derive(a).derive(b)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("all log-weights are -inf".into()));
    }
    if max.is_nan() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::Degenerate("NaN log-weight".into()));
    }
    if max == f64::INFINITY {
        return Err(Error::Degenerate("+inf log-weight".into()));
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Normalized linear weights from log-weights.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_weights)?;
    Ok(log_weights.iter().map(|lw| (lw - lse).exp()).collect())
}

/// Unnormalized log-weights of a particle system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogWeights(pub Vec<f64>);

impl LogWeights {
    pub fn uniform(count: usize) -> Self {
        Self(vec![-(count as f64).ln(); count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn normalized(&self) -> Result<Vec<f64>> {
        normalize_log_weights(&self.0)
    }

    /// Log-weights shifted so that they log-sum-exp to zero.
    pub fn log_normalized(&self) -> Result<Vec<f64>> {
        let lse = log_sum_exp(&self.0)?;
        Ok(self.0.iter().map(|lw| lw - lse).collect())
    }

    pub fn ess(&self) -> Result<f64> {
        Ok(ess(&self.normalized()?))
    }
}

/// Effective sample size `1 / Σ W²` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// Draws `count` i.i.d. ancestor indices from the categorical law `weights`.
pub fn multinomial_resample(weights: &[f64], count: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let total = acc;
    let last = weights.len() - 1;
    (0..count)
        .map(|_| {
            let u = rng.uniform() * total;
            let idx = cumulative.partition_point(|c| *c < u).min(last);
            // Skip trailing zero-weight entries that a rounding edge could land on.
            if weights[idx] > 0.0 {
                idx
            } else {
                (0..=idx).rev().find(|&i| weights[i] > 0.0).unwrap_or(idx)
            }
        })
        .collect()
}

/// Single categorical draw.
pub fn categorical(weights: &[f64], rng: &mut RngStream) -> usize {
    multinomial_resample(weights, 1, rng)[0]
}

/// Cholesky factor of a symmetric matrix, retrying with a jitter ladder.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let n = cov.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let shifted = cov + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(ch) = Cholesky::<f64, Dyn>::new(shifted) {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(format!(
        "matrix of size {n} is not positive definite even with jitter {JITTER_MAX}"
    )))
}

fn check_symmetric(cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() {
        return Err(Error::Factorization("covariance is not square".into()));
    }
    let scale = cov.amax().max(1.0);
    for i in 0..cov.nrows() {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Factorization(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    log_det: f64,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&covariance)?;
        if covariance.nrows() != mean.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        let factor = cholesky_with_jitter(&covariance)?;
        let log_det = 2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            mean,
            covariance,
            factor,
            log_det,
        })
    }

    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(DVector::from_column_slice(mean), DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

/// Exact multivariate normal log-density.
pub fn gaussian_logpdf(x: &[f64], spec: &GaussianSpec) -> Result<f64> {
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x.len(),
        });
    }
    // Forward substitution L y = x - mean.
    let l = &spec.factor;
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = x[i] - spec.mean[i];
        for (j, yj) in y.iter().enumerate().take(i) {
            acc -= l[(i, j)] * yj;
        }
        y[i] = acc / l[(i, i)];
    }
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-0.5 * (d as f64 * LN_2PI + spec.log_det + quad))
}

pub fn gaussian_sample(spec: &GaussianSpec, rng: &mut RngStream) -> Vec<f64> {
    let d = spec.dim();
    let eps: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let l = &spec.factor;
    (0..d)
        .map(|i| spec.mean[i] + (0..=i).map(|j| l[(i, j)] * eps[j]).sum::<f64>())
        .collect()
}

/// Log-normal law: `log θ ~ N(location, covariance)`.
#[derive(Clone, Debug)]
pub struct LogNormalSpec {
    log_space: GaussianSpec,
}

impl LogNormalSpec {
    pub fn new(location: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            log_space: GaussianSpec::new(location, covariance)?,
        })
    }

    pub fn isotropic(location: &[f64], variance: f64) -> Result<Self> {
        Ok(Self {
            log_space: GaussianSpec::isotropic(location, variance)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_space.dim()
    }

    pub fn location(&self) -> &DVector<f64> {
        self.log_space.mean()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.log_space.covariance()
    }

    pub fn log_space(&self) -> &GaussianSpec {
        &self.log_space
    }
}

/// Log-normal log-density including the `-Σ log θ_i` Jacobian.
pub fn lognormal_logpdf(theta: &[f64], spec: &LogNormalSpec) -> Result<f64> {
    if let Some(bad) = theta.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!(
            "log-normal density needs positive parameters, got {bad}"
        )));
    }
    let logs: Vec<f64> = theta.iter().map(|t| t.ln()).collect();
    let jac: f64 = logs.iter().sum();
    Ok(gaussian_logpdf(&logs, &spec.log_space)? - jac)
}

pub fn lognormal_sample(spec: &LogNormalSpec, rng: &mut RngStream) -> Vec<f64> {
    gaussian_sample(&spec.log_space, rng)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Weighted first and second central moments of `particles` (rows of length `dim`).
pub fn weighted_mean_cov(particles: &[f64], dim: usize, weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(dim);
    for (row, w) in particles.chunks_exact(dim).zip(weights) {
        for k in 0..dim {
            mean[k] += w * row[k];
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (row, w) in particles.chunks_exact(dim).zip(weights) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[(i, j)] += w * di * (row[j] - mean[j]);
            }
        }
    }
    (mean, cov)
}
