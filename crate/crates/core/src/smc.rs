//! Inside-Out SMC²: an outer particle filter over design/outcome histories
//! whose marginal dynamics come from an inner θ-posterior per history
//! (IBIS particles, or a closed-form Gaussian for conditionally linear
//! models).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Environment, Trajectory};
use crate::policy::{policy_input, random_policy_sample, DesignPolicy, PolicyState};
use crate::posterior::{
    conjugate_expected_loglik, conjugate_marginal_logpdf, conjugate_update, rejuvenate, ConjugatePosterior, MhConfig,
    MoveStats, ThetaParticleSet, Transition, DEFAULT_ESS_THRESHOLD,
};
use crate::stats::{categorical, gaussian_sample, multinomial_resample, GaussianSpec, LogWeights, RngStream};

/// Which stage reward drives the outer potentials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardForm {
    /// `−log p̂(x_{t+1} | z_{0:t}, ξ_t)`; exact up to a constant when the
    /// transition noise does not depend on θ.
    ConstantNoise,
    /// `Σ W' log f − log Σ W f`.
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialConfig {
    /// Tempering η.
    pub eta: f64,
    /// Slew-rate penalty λ on `‖ξ_t − ξ_{t−1}‖²`.
    pub slew_penalty: f64,
    pub reward_form: RewardForm,
}

impl PotentialConfig {
    pub fn new(eta: f64, slew_penalty: f64) -> Self {
        Self {
            eta,
            slew_penalty,
            reward_form: RewardForm::General,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("tempering η must be ≥ 0, got {}", self.eta)));
        }
        if !(self.slew_penalty >= 0.0 && self.slew_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "slew penalty must be ≥ 0, got {}",
                self.slew_penalty
            )));
        }
        Ok(())
    }
}

/// Both forms of the η = 1 stage reward for one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRewards {
    pub general: f64,
    pub constant_noise: f64,
}

impl StageRewards {
    pub fn get(&self, form: RewardForm) -> f64 {
        match form {
            RewardForm::General => self.general,
            RewardForm::ConstantNoise => self.constant_noise,
        }
    }
}

/// θ-posterior attached to a history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Posterior {
    Particles(ThetaParticleSet),
    Gaussian(ConjugatePosterior),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMode {
    /// IBIS particles.
    Ibis,
    /// Closed-form Gaussian posterior (conditionally linear models only).
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    /// Outer (history) particles.
    pub n: usize,
    /// Inner θ particles; unused in exact mode.
    pub m: usize,
    pub mode: InnerMode,
    pub potential: PotentialConfig,
    pub mh: MhConfig,
    pub ess_threshold: f64,
    /// Multinomial resampling of histories at every step.
    pub resampling: bool,
}

impl SmcConfig {
    pub fn new(n: usize, m: usize, mode: InnerMode, potential: PotentialConfig, mh: MhConfig) -> Self {
        Self {
            n,
            m,
            mode,
            potential,
            mh,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            resampling: true,
        }
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("need at least one outer particle".into()));
        }
        if self.mode == InnerMode::Ibis && self.m == 0 {
            return Err(Error::Config("need at least one θ particle".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::Config(format!(
                "ESS threshold must lie in [0, 1], got {}",
                self.ess_threshold
            )));
        }
        if self.mode == InnerMode::Exact && !(env.is_conditionally_linear() && env.prior().is_gaussian()) {
            return Err(Error::Config(format!(
                "exact mode needs a conditionally linear environment with a Gaussian prior; {} is not",
                env.name()
            )));
        }
        self.potential.validate()?;
        self.mh.validate()
    }
}

/// Reward and Bayes update from per-particle transition log-likelihoods.
///
/// With `d_m = ℓ_m − max ℓ`, the general reward is
/// `Σ W'_m d_m − log(Σ W_m e^{d_m} / Σ W_m)`, which is exactly zero when
/// the likelihood does not depend on θ.
fn rewards_from_logliks(set: &ThetaParticleSet, ll: &[f64]) -> Result<(StageRewards, ThetaParticleSet)> {
    let max = ll
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "observation has zero likelihood under every θ particle".into(),
        ));
    }
    let w = set.weights()?;
    let e: Vec<f64> = ll.iter().map(|v| (v - max).exp()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (wm, em) in w.iter().zip(&e) {
        den += wm;
        num += wm * em;
    }
    if !(num > 0.0) {
        return Err(Error::Degenerate(
            "observation has zero likelihood under every weighted θ particle".into(),
        ));
    }
    let log_ratio = (num / den).ln();
    let mut expected = 0.0;
    let mut log_weights = Vec::with_capacity(w.len());
    let log_num = num.ln();
    for ((wm, em), lm) in w.iter().zip(&e).zip(ll) {
        let wp = wm * em / num;
        if wp > 0.0 {
            expected += wp * (lm - max);
            log_weights.push(wm.ln() + (lm - max) - log_num);
        } else {
            log_weights.push(f64::NEG_INFINITY);
        }
    }
    let rewards = StageRewards {
        general: expected - log_ratio,
        constant_noise: -(max + log_ratio),
    };
    let after = ThetaParticleSet {
        dim: set.dim,
        particles: set.particles.clone(),
        log_weights: LogWeights(log_weights),
        loglik: set.loglik.iter().zip(ll).map(|(a, b)| a + b).collect(),
    };
    Ok((rewards, after))
}

/// Stage rewards of `x → x_next` under the particle posterior, plus the
/// Bayes-reweighted (not resampled) set conditioning on the transition.
pub fn stage_reward(
    set_before: &ThetaParticleSet,
    env: &Environment,
    x_next: &[f64],
    x: &[f64],
    design: &[f64],
) -> Result<(StageRewards, ThetaParticleSet)> {
    let ll = set_before.transition_logliks(env, x_next, x, design)?;
    rewards_from_logliks(set_before, &ll)
}

/// Closed-form stage rewards under a Gaussian posterior:
/// `E_{p(θ|z_{0:t+1})}[log f] − log p(x_{t+1} | z_{0:t}, ξ_t)`.
pub fn stage_reward_exact(
    post_before: &ConjugatePosterior,
    env: &Environment,
    x_next: &[f64],
    x: &[f64],
    design: &[f64],
) -> Result<(StageRewards, ConjugatePosterior)> {
    let obs = env.linear_observation(x_next, x, design)?;
    let log_marginal = conjugate_marginal_logpdf(post_before, &obs.y, &obs.h, &obs.sigma)?;
    let after = conjugate_update(post_before, &obs.y, &obs.h, &obs.sigma)?;
    let expected = conjugate_expected_loglik(&after, &obs.y, &obs.h, &obs.sigma)?;
    Ok((
        StageRewards {
            general: expected - log_marginal,
            constant_noise: -log_marginal,
        },
        after,
    ))
}

fn stage_reward_any(
    post: &Posterior,
    env: &Environment,
    x_next: &[f64],
    x: &[f64],
    design: &[f64],
) -> Result<(StageRewards, Posterior)> {
    Ok(match post {
        Posterior::Particles(set) => {
            let (r, after) = stage_reward(set, env, x_next, x, design)?;
            (r, Posterior::Particles(after))
        }
        Posterior::Gaussian(g) => {
            let (r, after) = stage_reward_exact(g, env, x_next, x, design)?;
            (r, Posterior::Gaussian(after))
        }
    })
}

/// `η·r̂ − λ‖ξ_t − ξ_{t−1}‖²`, the slew term vanishing at t = 0.
pub fn potential_log(reward: f64, design: &[f64], prev_design: Option<&[f64]>, cfg: &PotentialConfig) -> f64 {
    let base = if cfg.eta == 0.0 { 0.0 } else { cfg.eta * reward };
    match prev_design {
        Some(prev) if cfg.slew_penalty > 0.0 => {
            let sq: f64 = design.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
            base - cfg.slew_penalty * sq
        }
        _ => base,
    }
}

/// Draws `x_{t+1}` from the posterior-mixture marginal dynamics.
pub fn sample_marginal(
    post: &Posterior,
    env: &Environment,
    x: &[f64],
    design: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    match post {
        Posterior::Particles(set) => {
            let w = set.weights()?;
            let m = categorical(&w, rng);
            env.em_step(x, design, set.particle(m), rng)
        }
        Posterior::Gaussian(g) => {
            env.check_design(design)?;
            let (_, h) = env.linear_design_matrix(x, design)?;
            let mean = &h * &g.mean;
            let cov = &h * &g.cov * h.transpose() + env.noise_covariance();
            let spec = GaussianSpec::new(mean, (&cov + cov.transpose()) * 0.5)?;
            let y = gaussian_sample(&spec, rng);
            env.compose_linear_next(x, design, &y)
        }
    }
}

fn prior_posterior(env: &Environment, cfg: &SmcConfig, rng: &mut RngStream) -> Result<Posterior> {
    Ok(match cfg.mode {
        InnerMode::Ibis => Posterior::Particles(ThetaParticleSet::from_prior(env.prior(), cfg.m, rng)),
        InnerMode::Exact => Posterior::Gaussian(ConjugatePosterior::from_prior(env.prior())?),
    })
}

/// One node of a persistent history tree: `z_t` plus the posteriors around
/// the transition that produced it.
#[derive(Debug)]
pub(crate) struct Node {
    x: Vec<f64>,
    design: Option<Vec<f64>>,
    presquash: Option<Vec<f64>>,
    rewards: StageRewards,
    /// Posterior used to generate this state (conditions on `z_{0:t-1}`).
    snapshot: Option<Arc<Posterior>>,
    /// Posterior conditioning on `z_{0:t}`, before any rejuvenation.
    after: Option<Arc<Posterior>>,
    parent: Option<Arc<Node>>,
}

impl Node {
    fn root(x: Vec<f64>) -> Self {
        Self {
            x,
            design: None,
            presquash: None,
            rewards: StageRewards::default(),
            snapshot: None,
            after: None,
            parent: None,
        }
    }

    /// Nodes from `z_0` to this one.
    fn path(&self) -> Vec<&Node> {
        let mut out = vec![self];
        let mut cur = self;
        while let Some(p) = cur.parent.as_deref() {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    fn trajectory(&self) -> Trajectory {
        let path = self.path();
        let mut traj = Trajectory::new(path[0].x.clone());
        for n in &path[1..] {
            traj.push(
                n.x.clone(),
                n.design.clone().expect("design after t = 0"),
                n.presquash.clone(),
            );
        }
        traj
    }

    fn rewards(&self) -> Vec<StageRewards> {
        self.path()[1..].iter().map(|n| n.rewards).collect()
    }

    fn snapshots(&self) -> Vec<Posterior> {
        self.path()[1..]
            .iter()
            .map(|n| n.snapshot.as_deref().expect("snapshot").clone())
            .collect()
    }
}

/// History with the θ-posterior snapshot used at every step:
/// `theta_snapshots[t]` conditions on `z_{0:t}` and generated `z_{t+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub trajectory: Trajectory,
    pub theta_snapshots: Vec<Posterior>,
}

impl ReferenceTrajectory {
    pub fn validate(&self, env: &Environment, cfg: &SmcConfig) -> Result<()> {
        self.trajectory.validate()?;
        let t = self.trajectory.len();
        if t != env.horizon() || self.theta_snapshots.len() != t {
            return Err(Error::Config(format!(
                "reference has {} transitions and {} snapshots; horizon is {}",
                t,
                self.theta_snapshots.len(),
                env.horizon()
            )));
        }
        if self.trajectory.states[0].x != env.x0() {
            return Err(Error::Config("reference does not start at x0".into()));
        }
        for snap in &self.theta_snapshots {
            let ok = match (snap, cfg.mode) {
                (Posterior::Particles(s), InnerMode::Ibis) => s.len() == cfg.m && s.dim == env.theta_dim(),
                (Posterior::Gaussian(g), InnerMode::Exact) => g.dim() == env.theta_dim(),
                _ => false,
            };
            if !ok {
                return Err(Error::Config(
                    "reference posterior snapshots do not match the filter configuration".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Output of a filter run.
#[derive(Clone, Debug)]
pub struct WeightedTrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub log_weights: LogWeights,
    /// Posterior conditioning on each full history.
    pub theta_posteriors: Vec<Posterior>,
    /// η = 1 general-form stage rewards per history.
    pub reward_history: Vec<Vec<f64>>,
    pub move_stats: MoveStats,
}

impl WeightedTrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// `Σ_t r̂_t` per history.
    pub fn total_rewards(&self) -> Vec<f64> {
        self.reward_history.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Final particle system of one filter run.
pub(crate) struct FilterRun {
    pub(crate) leaves: Vec<Arc<Node>>,
    pub(crate) log_weights: Vec<f64>,
    pub(crate) move_stats: MoveStats,
}

impl FilterRun {
    pub(crate) fn into_weighted_set(self) -> WeightedTrajectorySet {
        let trajectories = self.leaves.iter().map(|l| l.trajectory()).collect();
        let reward_history = self
            .leaves
            .iter()
            .map(|l| l.rewards().iter().map(|r| r.general).collect())
            .collect();
        let theta_posteriors = self
            .leaves
            .iter()
            .map(|l| l.after.as_deref().expect("posterior after step").clone())
            .collect();
        WeightedTrajectorySet {
            trajectories,
            log_weights: LogWeights(self.log_weights),
            theta_posteriors,
            reward_history,
            move_stats: self.move_stats,
        }
    }

    pub(crate) fn reference(&self, index: usize) -> ReferenceTrajectory {
        let leaf = &self.leaves[index];
        ReferenceTrajectory {
            trajectory: leaf.trajectory(),
            theta_snapshots: leaf.snapshots(),
        }
    }
}

const RESAMPLE_STREAM: u64 = u64::MAX - 1;

struct StepOutput {
    node: Arc<Node>,
    log_potential: f64,
    stats: MoveStats,
}

/// Runs the nested filter; with `reference`, slot 0 is pinned to it
/// (conditional SMC).
pub(crate) fn run_filter(
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    reference: Option<&ReferenceTrajectory>,
    rng: &RngStream,
) -> Result<FilterRun> {
    cfg.validate(env)?;
    if let DesignPolicy::Network(p) = policy {
        p.check_environment(env)?;
    }
    if let Some(r) = reference {
        r.validate(env, cfg)?;
    }
    let n = cfg.n;
    let horizon = env.horizon();
    let root = Arc::new(Node::root(env.x0().to_vec()));
    let mut leaves: Vec<Arc<Node>> = vec![root; n];
    let mut log_weights = vec![0.0; n];
    let mut stats = MoveStats::default();
    let mut policy_state = match policy {
        DesignPolicy::Network(p) => Some(PolicyState::zeros(p.arch(), 1)),
        DesignPolicy::Random => None,
    };
    // Row of `policy_state` holding the recurrent state of each particle's history.
    let mut state_rows: Vec<usize> = vec![0; n];

    for t in 0..horizon {
        let ancestors: Vec<usize> = if t > 0 && cfg.resampling {
            let w = LogWeights(log_weights.clone())
                .normalized()
                .map_err(|_| Error::DegenerateAtStep {
                    step: t,
                    reason: "all outer weights vanished".into(),
                })?;
            let mut rs = rng.derive2(RESAMPLE_STREAM, t as u64);
            let mut a = multinomial_resample(&w, n, &mut rs);
            if reference.is_some() {
                a[0] = 0;
            }
            a
        } else {
            (0..n).collect()
        };

        // Policy means for the distinct surviving histories only.
        let (means, unique_of): (Option<Array2<f64>>, Vec<usize>) = match (policy, &policy_state) {
            (DesignPolicy::Network(p), Some(state)) => {
                let mut slot = vec![usize::MAX; n];
                let mut unique = Vec::new();
                let mut unique_of = vec![0; n];
                for (i, &a) in ancestors.iter().enumerate() {
                    if slot[a] == usize::MAX {
                        slot[a] = unique.len();
                        unique.push(a);
                    }
                    unique_of[i] = slot[a];
                }
                let d = p.design_dim();
                let mut inputs = Array2::zeros((unique.len(), p.arch().input_dim));
                for (r, &a) in unique.iter().enumerate() {
                    let node = &leaves[a];
                    let row = policy_input(&node.x, node.design.as_deref(), d);
                    inputs.row_mut(r).assign(&ArrayView1::from(&row));
                }
                let rows: Vec<usize> = unique.iter().map(|&a| state_rows[a]).collect();
                let (m, next) = p.step(&state.select(&rows), inputs.view());
                policy_state = Some(next);
                state_rows = unique_of.clone();
                (Some(m), unique_of)
            }
            _ => (None, vec![0; n]),
        };

        let step = |i: usize| -> Result<StepOutput> {
            let parent = &leaves[ancestors[i]];
            let mut prng = rng.derive2(t as u64, i as u64);
            let mut local = MoveStats::default();
            let pinned = reference.filter(|_| i == 0);
            let snapshot: Arc<Posterior> = if let Some(r) = pinned {
                Arc::new(r.theta_snapshots[t].clone())
            } else if t == 0 {
                Arc::new(prior_posterior(env, cfg, &mut prng)?)
            } else {
                let after = parent.after.as_ref().expect("posterior after step");
                match after.as_ref() {
                    Posterior::Particles(set) => {
                        let path = parent.path();
                        let transitions: Vec<Transition<'_>> = path
                            .windows(2)
                            .map(|w| {
                                (
                                    w[0].x.as_slice(),
                                    w[1].design.as_deref().expect("design"),
                                    w[1].x.as_slice(),
                                )
                            })
                            .collect();
                        let (moved, s) = rejuvenate(set, &transitions, env, &cfg.mh, cfg.ess_threshold, &mut prng)?;
                        local = s;
                        if s.proposed == 0 {
                            Arc::clone(after)
                        } else {
                            Arc::new(Posterior::Particles(moved))
                        }
                    }
                    Posterior::Gaussian(_) => Arc::clone(after),
                }
            };
            let (design, presquash, x_next) = if let Some(r) = pinned {
                let st = &r.trajectory.states[t + 1];
                (st.design.clone().expect("design"), st.presquash.clone(), st.x.clone())
            } else {
                let (design, presquash) = match (policy, &means) {
                    (DesignPolicy::Network(p), Some(m)) => {
                        let (xi, s) = p.sample_from_mean(m.row(unique_of[i]), &mut prng);
                        (xi, Some(s))
                    }
                    _ => (random_policy_sample(env, &mut prng), None),
                };
                let x_next = sample_marginal(&snapshot, env, &parent.x, &design, &mut prng)?;
                (design, presquash, x_next)
            };
            let (rewards, after) = stage_reward_any(&snapshot, env, &x_next, &parent.x, &design)?;
            let log_potential = potential_log(
                rewards.get(cfg.potential.reward_form),
                &design,
                parent.design.as_deref(),
                &cfg.potential,
            );
            Ok(StepOutput {
                node: Arc::new(Node {
                    x: x_next,
                    design: Some(design),
                    presquash,
                    rewards,
                    snapshot: Some(snapshot),
                    after: Some(Arc::new(after)),
                    parent: Some(Arc::clone(parent)),
                }),
                log_potential,
                stats: local,
            })
        };
        let outputs: Vec<StepOutput> =
            (0..n)
                .into_par_iter()
                .map(step)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Degenerate(reason) => Error::DegenerateAtStep { step: t, reason },
                    other => other,
                })?;

        let mut next_leaves = Vec::with_capacity(n);
        for (i, out) in outputs.into_iter().enumerate() {
            stats.merge(out.stats);
            log_weights[i] = if cfg.resampling {
                out.log_potential
            } else {
                log_weights[i] + out.log_potential
            };
            next_leaves.push(out.node);
        }
        leaves = next_leaves;
        if log_weights.iter().all(|v| !v.is_finite()) {
            return Err(Error::DegenerateAtStep {
                step: t,
                reason: "every outer potential is zero or undefined".into(),
            });
        }
    }
    let log_weights = LogWeights(log_weights)
        .log_normalized()
        .map_err(|_| Error::DegenerateAtStep {
            step: horizon,
            reason: "final outer weights cannot be normalized".into(),
        })?;
    Ok(FilterRun {
        leaves,
        log_weights,
        move_stats: stats,
    })
}

/// Inside-Out SMC² with IBIS inner filters.
#[allow(clippy::too_many_arguments)]
pub fn io_smc2(
    env: &Environment,
    policy: DesignPolicy<'_>,
    n: usize,
    m: usize,
    potential: PotentialConfig,
    mh: MhConfig,
    resampling: bool,
    rng: &RngStream,
) -> Result<WeightedTrajectorySet> {
    let mut cfg = SmcConfig::new(n, m, InnerMode::Ibis, potential, mh);
    cfg.resampling = resampling;
    Ok(run_filter(env, policy, &cfg, None, rng)?.into_weighted_set())
}

/// Inside-Out SMC² with closed-form Gaussian θ-posteriors.
pub fn io_smc2_exact(
    env: &Environment,
    policy: DesignPolicy<'_>,
    n: usize,
    potential: PotentialConfig,
    resampling: bool,
    rng: &RngStream,
) -> Result<WeightedTrajectorySet> {
    let mut cfg = SmcConfig::new(n, 0, InnerMode::Exact, potential, MhConfig::default_for(env));
    cfg.resampling = resampling;
    Ok(run_filter(env, policy, &cfg, None, rng)?.into_weighted_set())
}

/// Runs the filter described by `cfg` and returns the weighted histories.
pub fn run_smc(
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<WeightedTrajectorySet> {
    Ok(run_filter(env, policy, cfg, None, rng)?.into_weighted_set())
}

/// Column names for design components: `xi`, or `xi_0, xi_1, …`.
pub fn design_columns(design_dim: usize) -> Vec<String> {
    if design_dim == 1 {
        vec!["xi".into()]
    } else {
        (0..design_dim).map(|i| format!("xi_{i}")).collect()
    }
}

/// Writes one history as CSV: `t, <state>, xi` plus `reward, weight` when
/// `annotations = Some((rewards, weight))`. Row t holds `x_t`, the design
/// `ξ_{t−1}` that produced it (zero at t = 0) and the reward of that
/// transition.
pub fn write_trajectory_csv(
    path: &Path,
    env: &Environment,
    trajectory: &Trajectory,
    annotations: Option<(&[f64], f64)>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend(env.state_names().iter().cloned());
    header.extend(design_columns(env.design_dim()));
    if annotations.is_some() {
        header.push("reward".into());
        header.push("weight".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for (t, st) in trajectory.states.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(st.x.iter().map(|v| v.to_string()));
        match &st.design {
            Some(d) => row.extend(d.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n("0".to_string(), env.design_dim())),
        }
        if let Some((rewards, weight)) = annotations {
            let r = if t == 0 {
                0.0
            } else {
                rewards.get(t - 1).copied().unwrap_or(0.0)
            };
            row.push(r.to_string());
            row.push(weight.to_string());
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Observation vector helper for tests and diagnostics.
pub fn noisy_increment(env: &Environment, x_next: &[f64], x: &[f64], design: &[f64]) -> Result<DVector<f64>> {
    Ok(env.linear_observation(x_next, x, design)?.y)
}
