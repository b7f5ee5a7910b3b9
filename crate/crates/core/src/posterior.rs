//! Running parameter posteriors: IBIS with resample-move, Metropolis–Hastings
//! rejuvenation kernels, and closed-form Gaussian updates for conditionally
//! linear models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Environment, LinearObservation, Prior, Trajectory};
use crate::stats::{
    cholesky_with_jitter, log_sum_exp, multinomial_resample, GaussianSpec, LogWeights, RngStream, LN_2PI,
};

/// Weighted parameter particles approximating `p(θ | z_{0:t})`.
///
/// `loglik[m]` caches `Σ_s log f(x_s | x_{s-1}, ξ_{s-1}, θ_m)` over the
/// history the set has absorbed; it is the data term of the MH target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaParticleSet {
    pub dim: usize,
    pub particles: Vec<f64>,
    pub log_weights: LogWeights,
    pub loglik: Vec<f64>,
}

impl ThetaParticleSet {
    pub fn from_prior(prior: &Prior, count: usize, rng: &mut RngStream) -> Self {
        let dim = prior.dim();
        let mut particles = Vec::with_capacity(count * dim);
        for _ in 0..count {
            particles.extend(prior.sample(rng));
        }
        Self {
            dim,
            particles,
            log_weights: LogWeights::uniform(count),
            loglik: vec![0.0; count],
        }
    }

    /// Equally weighted set from explicit particles (rows of length `dim`).
    pub fn from_particles(dim: usize, particles: Vec<f64>) -> Self {
        let count = particles.len() / dim;
        Self {
            dim,
            particles,
            log_weights: LogWeights::uniform(count),
            loglik: vec![0.0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.loglik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loglik.is_empty()
    }

    pub fn particle(&self, m: usize) -> &[f64] {
        &self.particles[m * self.dim..(m + 1) * self.dim]
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        self.log_weights.normalized()
    }

    pub fn ess(&self) -> Result<f64> {
        self.log_weights.ess()
    }

    /// `log f(x_next | x, ξ, θ_m)` for every particle.
    pub fn transition_logliks(&self, env: &Environment, x_next: &[f64], x: &[f64], design: &[f64]) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|m| env.transition_logpdf_lenient(x_next, x, design, self.particle(m)))
            .collect()
    }

    /// Bayes reweighting by precomputed per-particle log-likelihoods.
    pub fn reweighted(&self, logliks: &[f64]) -> Result<Self> {
        let raw: Vec<f64> = self.log_weights.0.iter().zip(logliks).map(|(lw, ll)| lw + ll).collect();
        let lse = log_sum_exp(&raw)
            .map_err(|_| Error::Degenerate("observation has zero likelihood under every particle".into()))?;
        Ok(Self {
            dim: self.dim,
            particles: self.particles.clone(),
            log_weights: LogWeights(raw.into_iter().map(|v| v - lse).collect()),
            loglik: self.loglik.iter().zip(logliks).map(|(a, b)| a + b).collect(),
        })
    }

    /// Reweights by the transition `x → x_next` under design ξ.
    pub fn reweight(&self, env: &Environment, x_next: &[f64], x: &[f64], design: &[f64]) -> Result<Self> {
        let ll = self.transition_logliks(env, x_next, x, design)?;
        self.reweighted(&ll)
    }
}

/// Random-walk proposal used by the MH rejuvenation kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalFamily {
    /// `θ' ~ N(θ, c I)`.
    GaussianWalk,
    /// `log θ' ~ N(log θ, c I)`, i.e. `θ' ~ LogNormal` centred at θ.
    LognormalWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    /// Proposal variance `c`.
    pub step_scale: f64,
    pub num_moves: usize,
    pub proposal: ProposalFamily,
}

impl MhConfig {
    pub fn gaussian(step_scale: f64, num_moves: usize) -> Self {
        Self {
            step_scale,
            num_moves,
            proposal: ProposalFamily::GaussianWalk,
        }
    }

    pub fn lognormal(step_scale: f64, num_moves: usize) -> Self {
        Self {
            step_scale,
            num_moves,
            proposal: ProposalFamily::LognormalWalk,
        }
    }

    /// Shipped defaults for an environment's prior family.
    pub fn default_for(env: &Environment) -> Self {
        match env.prior() {
            Prior::Gaussian(_) => Self::gaussian(DEFAULT_GAUSSIAN_STEP, 1),
            Prior::LogNormal(_) => Self::lognormal(DEFAULT_LOGNORMAL_STEP, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::Config(format!(
                "MH step scale must be positive, got {}",
                self.step_scale
            )));
        }
        if self.num_moves == 0 {
            return Err(Error::Config("MH needs at least one move".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_GAUSSIAN_STEP: f64 = 0.1;
pub const DEFAULT_LOGNORMAL_STEP: f64 = 0.05;
pub const DEFAULT_ESS_THRESHOLD: f64 = 0.75;

/// Proposal/acceptance counters of the MH kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn merge(&mut self, other: MoveStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// `log q(to | from)` for the log-normal walk: a normal density on the log
/// scale plus the `-Σ log to_i` Jacobian.
fn lognormal_walk_logq(to: &[f64], from: &[f64], c: f64) -> f64 {
    let d = to.len() as f64;
    let quad: f64 = to
        .iter()
        .zip(from)
        .map(|(a, b)| {
            let z = a.ln() - b.ln();
            z * z
        })
        .sum();
    let jac: f64 = to.iter().map(|v| v.ln()).sum();
    -0.5 * (d * (LN_2PI + c.ln()) + quad / c) - jac
}

fn propose(theta: &[f64], mh: &MhConfig, rng: &mut RngStream) -> (Vec<f64>, f64) {
    let sd = mh.step_scale.sqrt();
    match mh.proposal {
        ProposalFamily::GaussianWalk => {
            let prop = theta.iter().map(|t| t + sd * rng.standard_normal()).collect();
            (prop, 0.0)
        }
        ProposalFamily::LognormalWalk => {
            let prop: Vec<f64> = theta
                .iter()
                .map(|t| (t.ln() + sd * rng.standard_normal()).exp())
                .collect();
            let correction =
                lognormal_walk_logq(theta, &prop, mh.step_scale) - lognormal_walk_logq(&prop, theta, mh.step_scale);
            (prop, correction)
        }
    }
}

/// One MH transition with the current target value supplied.
/// Returns `(θ', log target(θ'), accepted)`.
pub fn mh_move_cached<F>(
    theta: &[f64],
    current_log_target: f64,
    target_logpdf: F,
    mh: &MhConfig,
    rng: &mut RngStream,
) -> (Vec<f64>, f64, bool)
where
    F: Fn(&[f64]) -> f64,
{
    let (prop, correction) = propose(theta, mh, rng);
    let prop_log_target = target_logpdf(&prop);
    let log_ratio = prop_log_target - current_log_target + correction;
    let u = rng.uniform();
    if prop_log_target.is_finite() && u.ln() < log_ratio {
        (prop, prop_log_target, true)
    } else {
        (theta.to_vec(), current_log_target, false)
    }
}

/// One Metropolis–Hastings transition leaving `target_logpdf` invariant.
pub fn mh_move<F>(theta: &[f64], target_logpdf: F, mh: &MhConfig, rng: &mut RngStream) -> (Vec<f64>, bool)
where
    F: Fn(&[f64]) -> f64,
{
    let current = target_logpdf(theta);
    let (next, _, accepted) = mh_move_cached(theta, current, target_logpdf, mh, rng);
    (next, accepted)
}

/// `(x_{s-1}, ξ_{s-1}, x_s)`.
pub type Transition<'a> = (&'a [f64], &'a [f64], &'a [f64]);

/// Resample-move rejuvenation: when the ESS drops below
/// `ess_threshold · M`, resample multinomially and apply `num_moves` MH moves
/// targeting `p(θ) Π_s f(x_s | x_{s-1}, ξ_{s-1}, θ)` over `transitions`.
pub fn rejuvenate(
    set: &ThetaParticleSet,
    transitions: &[Transition<'_>],
    env: &Environment,
    mh: &MhConfig,
    ess_threshold: f64,
    rng: &mut RngStream,
) -> Result<(ThetaParticleSet, MoveStats)> {
    let weights = set.weights()?;
    let m = set.len();
    let ess = crate::stats::ess(&weights);
    if !(ess < ess_threshold * m as f64) {
        return Ok((set.clone(), MoveStats::default()));
    }
    let ancestors = multinomial_resample(&weights, m, rng);
    let prior = env.prior();
    let target = |theta: &[f64]| -> f64 {
        let lp = prior.logpdf_or_neg_inf(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        match env.trajectory_loglik(transitions.iter().copied(), theta) {
            Ok(ll) => lp + ll,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let dim = set.dim;
    let mut particles = Vec::with_capacity(m * dim);
    let mut loglik = Vec::with_capacity(m);
    let mut stats = MoveStats::default();
    for &a in &ancestors {
        let mut theta = set.particle(a).to_vec();
        let mut ll = set.loglik[a];
        let mut log_target = prior.logpdf_or_neg_inf(&theta) + ll;
        for _ in 0..mh.num_moves {
            let (next, next_target, accepted) = mh_move_cached(&theta, log_target, target, mh, rng);
            stats.proposed += 1;
            if accepted {
                stats.accepted += 1;
                ll = next_target - prior.logpdf_or_neg_inf(&next);
                theta = next;
                log_target = next_target;
            }
        }
        particles.extend_from_slice(&theta);
        loglik.push(ll);
    }
    Ok((
        ThetaParticleSet {
            dim,
            particles,
            log_weights: LogWeights::uniform(m),
            loglik,
        },
        stats,
    ))
}

/// One IBIS step: reweight by the newest transition of `trajectory`, then
/// rejuvenate if the ESS fell below `ess_threshold · M`.
///
/// The policy factor of `p_φ(z_t | z_{0:t-1}, θ)` does not depend on θ and
/// cancels in the normalization, so only the transition density enters.
pub fn ibis_step(
    trajectory: &Trajectory,
    set: &ThetaParticleSet,
    env: &Environment,
    mh: &MhConfig,
    ess_threshold: f64,
    rng: &mut RngStream,
) -> Result<(ThetaParticleSet, MoveStats)> {
    let t = trajectory.len();
    if t == 0 {
        return Err(Error::InconsistentTrajectory(
            "IBIS step needs at least one transition".into(),
        ));
    }
    let prev = &trajectory.states[t - 1];
    let last = &trajectory.states[t];
    let design = last
        .design
        .as_deref()
        .ok_or_else(|| Error::InconsistentTrajectory("missing design".into()))?;
    let reweighted = set.reweight(env, &last.x, &prev.x, design)?;
    let transitions: Vec<Transition<'_>> = trajectory.transitions().collect();
    rejuvenate(&reweighted, &transitions, env, mh, ess_threshold, rng)
}

/// `log Σ_m W_m f(x_next | x, ξ, θ_m)`.
pub fn particle_marginal_logpdf(
    set: &ThetaParticleSet,
    env: &Environment,
    x_next: &[f64],
    x: &[f64],
    design: &[f64],
) -> Result<f64> {
    let lw = set.log_weights.log_normalized()?;
    let ll = set.transition_logliks(env, x_next, x, design)?;
    let terms: Vec<f64> = lw.iter().zip(&ll).map(|(a, b)| a + b).collect();
    log_sum_exp(&terms).map_err(|_| Error::Degenerate("marginal density is zero under every particle".into()))
}

/// Gaussian posterior `N(θ | m, P)` of a conditionally linear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ConjugatePosterior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn from_prior(prior: &Prior) -> Result<Self> {
        match prior {
            Prior::Gaussian(g) => Ok(Self::new(g.mean().clone(), g.covariance().clone())),
            Prior::LogNormal(_) => Err(Error::Config("closed-form posterior needs a Gaussian prior".into())),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Differential entropy of the Gaussian.
    pub fn entropy(&self) -> Result<f64> {
        let l = cholesky_with_jitter(&self.cov)?;
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(0.5 * (self.dim() as f64 * (1.0 + LN_2PI) + log_det))
    }
}

/// Solves `S X = B` for symmetric positive-definite `S` via its Cholesky factor.
fn spd_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l.solve_lower_triangular(b).expect("nonsingular factor");
    l.transpose().solve_upper_triangular(&y).expect("nonsingular factor")
}

/// Kalman-style update: `G = P Hᵀ (H P Hᵀ + Σ)⁻¹`, `m' = m + G (y − H m)`,
/// `P' = P − G H P` (symmetrized).
pub fn conjugate_update(
    post: &ConjugatePosterior,
    observation: &DVector<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<ConjugatePosterior> {
    if h.ncols() != post.dim() || h.nrows() != observation.len() {
        return Err(Error::Dimension {
            expected: post.dim(),
            got: h.ncols(),
        });
    }
    let ph_t = &post.cov * h.transpose();
    let s = h * &ph_t + sigma;
    let l = cholesky_with_jitter(&s)?;
    // G = P Hᵀ S⁻¹  ⇔  Gᵀ = S⁻¹ H P.
    let gain = spd_solve(&l, &ph_t.transpose()).transpose();
    let innovation = observation - h * &post.mean;
    let mean = &post.mean + &gain * innovation;
    let mut cov = &post.cov - &gain * h * &post.cov;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(ConjugatePosterior { mean, cov })
}

/// Predictive density `N(y | H m, H P Hᵀ + Σ)` of the next observation.
pub fn conjugate_marginal_logpdf(
    post: &ConjugatePosterior,
    observation: &DVector<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let mean = h * &post.mean;
    let cov = h * &post.cov * h.transpose() + sigma;
    let spec = GaussianSpec::new(mean, (&cov + cov.transpose()) * 0.5)?;
    crate::stats::gaussian_logpdf(observation.as_slice(), &spec)
}

/// `E_{N(θ | m, P)}[log N(y | H θ, Σ)]` in closed form.
pub fn conjugate_expected_loglik(
    post: &ConjugatePosterior,
    observation: &DVector<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let spec = GaussianSpec::new(h * &post.mean, sigma.clone())?;
    let at_mean = crate::stats::gaussian_logpdf(observation.as_slice(), &spec)?;
    let l = spec.cholesky();
    let hph = h * &post.cov * h.transpose();
    let trace = spd_solve(l, &hph).trace();
    Ok(at_mean - 0.5 * trace)
}

/// Applies [`conjugate_update`] for a [`LinearObservation`].
pub fn conjugate_update_obs(post: &ConjugatePosterior, obs: &LinearObservation) -> Result<ConjugatePosterior> {
    conjugate_update(post, &obs.y, &obs.h, &obs.sigma)
}
