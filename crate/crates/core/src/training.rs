//! Markovian score climbing: iterate the conditional SMC kernel on a set of
//! reference histories, average their policy scores and take Adam ascent
//! steps on the policy parameters.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csmc::{csmc_sweep, initial_reference};
use crate::error::{Error, Result};
use crate::eval::{estimate_eig, EigConfig};
use crate::models::Environment;
use crate::policy::{DesignPolicy, PolicyParameters};
use crate::posterior::{MhConfig, MoveStats, DEFAULT_ESS_THRESHOLD};
use crate::smc::{InnerMode, PotentialConfig, ReferenceTrajectory, SmcConfig};
use crate::stats::RngStream;

const INIT_STREAM: u64 = 0;
const CHAIN_INIT_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub const TRAIN_STATE_FORMAT: &str = "iosmc-train-state";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Independent reference chains whose scores are averaged per step.
    pub chains: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Filter used inside the kernel (resampling is always on there).
    pub smc: SmcConfig,
    /// Per-epoch evaluation of the mean policy.
    pub eval: EigConfig,
    /// Scale of the uniform fan-in initialisation.
    pub init_scale: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference settings for the built-in environments; unknown names get
    /// the nonlinear pendulum values.
    pub fn defaults_for(env: &Environment) -> Self {
        let (mode, n, m, eta, moves, epochs) = match env.name() {
            "pendulum_linear" => (InnerMode::Exact, 256, 64, 0.5, 1, 15),
            "cartpole" => (InnerMode::Ibis, 256, 128, 0.25, 7, 10),
            _ => (InnerMode::Ibis, 256, 64, 0.5, 1, 15),
        };
        let mut mh = MhConfig::default_for(env);
        mh.num_moves = moves;
        let smc = SmcConfig {
            n,
            m,
            mode,
            potential: PotentialConfig::new(eta, 0.1),
            mh,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            resampling: true,
        };
        let eval = EigConfig {
            n,
            m,
            mode,
            mh,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
        };
        Self {
            epochs,
            steps_per_epoch: DEFAULT_STEPS_PER_EPOCH,
            chains: DEFAULT_CHAINS,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            smc,
            eval,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(
                "learning_rate must be a finite non-negative number".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        self.smc.validate(env)?;
        if self.eval.n == 0 || (self.eval.mode == InnerMode::Ibis && self.eval.m == 0) {
            return Err(Error::Config("evaluation needs N ≥ 1 and, in ibis mode, M ≥ 1".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_STEPS_PER_EPOCH: usize = 10;
pub const DEFAULT_CHAINS: usize = 4;

/// First and second moment accumulators of Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Bias-corrected ascent step `params += γ m̂ / (√v̂ + ε)`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p += cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: String,
    pub policy: PolicyParameters,
    pub adam: Adam,
    pub references: Vec<ReferenceTrajectory>,
    /// Completed score-climbing steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Root stream; all randomness is derived from it by tag, so it never
    /// advances.
    pub rng: RngStream,
}

impl TrainState {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let state: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if state.format != TRAIN_STATE_FORMAT {
            return Err(Error::Config(format!(
                "unrecognised training state format {:?}",
                state.format
            )));
        }
        if state.adam.m.len() != state.policy.num_params() || state.adam.v.len() != state.policy.num_params() {
            return Err(Error::Dimension {
                expected: state.policy.num_params(),
                got: state.adam.m.len(),
            });
        }
        Ok(state)
    }
}

/// Diagnostics of one score-climbing step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub move_stats: MoveStats,
    /// Chains whose reference survived the kernel.
    pub kept_references: usize,
    pub mean_log_policy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub eig_estimate: f64,
    pub eig_std_error: f64,
    /// IBIS move acceptance over the epoch's kernels; 0 when nothing moved.
    pub mean_acceptance_rate: f64,
    pub wall_clock_seconds: f64,
}

/// Fisher-identity score: the dynamics and prior do not depend on φ, so
/// `∇_φ log p_φ(z_{0:T})` is the gradient of the summed policy log-density.
pub fn score_estimate(reference: &ReferenceTrajectory, policy: &PolicyParameters) -> Result<Vec<f64>> {
    Ok(policy.trajectory_logpdf_grad(&reference.trajectory)?.1)
}

/// Fresh policy and one unconditional-filter reference per chain.
pub fn init_state(env: &Environment, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate(env)?;
    let rng = RngStream::from_seed(cfg.seed);
    let policy = PolicyParameters::for_environment(env, cfg.init_scale, &mut rng.derive(INIT_STREAM))?;
    let references = (0..cfg.chains)
        .into_par_iter()
        .map(|b| {
            initial_reference(
                env,
                DesignPolicy::Network(&policy),
                &cfg.smc,
                &rng.derive2(CHAIN_INIT_STREAM, b as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainState {
        format: TRAIN_STATE_FORMAT.into(),
        adam: Adam::new(policy.num_params()),
        policy,
        references,
        iteration: 0,
        epoch: 0,
        rng,
    })
}

/// Advances every chain by one kernel application at the current φ, then
/// ascends the chain-averaged score.
pub fn msc_step(state: &mut TrainState, env: &Environment, cfg: &TrainConfig) -> Result<StepStats> {
    let policy = &state.policy;
    let k = state.iteration;
    let step_rng = state.rng.derive(STEP_STREAM);
    let results = state
        .references
        .par_iter()
        .enumerate()
        .map(|(b, reference)| {
            let out = csmc_sweep(
                reference,
                env,
                DesignPolicy::Network(policy),
                &cfg.smc,
                &step_rng.derive2(k, b as u64),
            )?;
            let (logp, grad) = policy.trajectory_logpdf_grad(&out.reference.trajectory)?;
            Ok((out, logp, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let b = results.len() as f64;
    let mut score = vec![0.0; policy.num_params()];
    let mut stats = StepStats::default();
    let mut references = Vec::with_capacity(results.len());
    for (out, logp, grad) in results {
        for (s, g) in score.iter_mut().zip(&grad) {
            *s += g;
        }
        stats.move_stats.merge(out.move_stats);
        stats.kept_references += usize::from(out.selected == 0);
        stats.mean_log_policy += logp / b;
        references.push(out.reference);
    }
    for s in &mut score {
        *s /= b;
    }
    state.adam.ascend(state.policy.values_mut(), &score, cfg);
    state.references = references;
    state.iteration += 1;
    Ok(stats)
}

/// EIG of the mean policy.
pub fn evaluate_mean_policy(
    env: &Environment,
    policy: &PolicyParameters,
    eval: &EigConfig,
    rng: &RngStream,
) -> Result<crate::eval::EigEstimate> {
    let mean = policy.mean_policy();
    estimate_eig(env, DesignPolicy::Network(&mean), eval, rng)
}

/// `steps_per_epoch` score-climbing steps followed by an evaluation.
pub fn run_epoch(state: &mut TrainState, env: &Environment, cfg: &TrainConfig) -> Result<EpochMetrics> {
    let start = Instant::now();
    let mut moves = MoveStats::default();
    for _ in 0..cfg.steps_per_epoch {
        let stats = msc_step(state, env, cfg)?;
        moves.merge(stats.move_stats);
        log::debug!(
            "step {}: kept {}/{} references, mean log π {:.3}",
            state.iteration,
            stats.kept_references,
            cfg.chains,
            stats.mean_log_policy
        );
    }
    state.epoch += 1;
    let est = evaluate_mean_policy(
        env,
        &state.policy,
        &cfg.eval,
        &state.rng.derive2(EVAL_STREAM, state.epoch as u64),
    )?;
    Ok(EpochMetrics {
        epoch: state.epoch,
        eig_estimate: est.value,
        eig_std_error: est.std_error,
        mean_acceptance_rate: moves.acceptance_rate().unwrap_or(0.0),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each.
pub fn train_from<F>(
    state: &mut TrainState,
    env: &Environment,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate(env)?;
    state.policy.check_environment(env)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let metrics = run_epoch(state, env, cfg)?;
        log::info!(
            "epoch {}: EIG {:.3} ± {:.3} ({:.1}s)",
            metrics.epoch,
            metrics.eig_estimate,
            metrics.eig_std_error,
            metrics.wall_clock_seconds
        );
        on_epoch(state, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Trains from scratch; returns the final parameters and one metrics row
/// per epoch.
pub fn train(env: &Environment, cfg: &TrainConfig) -> Result<(PolicyParameters, Vec<EpochMetrics>)> {
    let mut state = init_state(env, cfg)?;
    let log = train_from(&mut state, env, cfg, |_, _| Ok(()))?;
    Ok((state.policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_pendulum_linear, make_pendulum_nonlinear};
    use crate::policy::PolicyArch;

    fn small(env: &Environment) -> TrainConfig {
        let mut cfg = TrainConfig::defaults_for(env);
        cfg.epochs = 2;
        cfg.steps_per_epoch = 2;
        cfg.chains = 2;
        cfg.smc.n = 8;
        cfg.smc.m = 8;
        cfg.eval.n = 8;
        cfg.eval.m = 8;
        cfg
    }

    fn compact_state(env: &Environment, cfg: &TrainConfig) -> TrainState {
        let mut state = init_state(env, cfg).unwrap();
        let arch = PolicyArch::compact(env.state_dim() + env.design_dim(), env.design_dim());
        state.policy = PolicyParameters::init(
            arch,
            env.design_scale(),
            env.design_shift(),
            1.0,
            &mut RngStream::from_seed(9),
        )
        .unwrap();
        state.adam = Adam::new(state.policy.num_params());
        state
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let env = make_pendulum_linear();
        let cfg = TrainConfig::defaults_for(&env);
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            adam.ascend(&mut p, &[0.0; 3], &cfg);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let env = make_pendulum_linear();
        let cfg = TrainConfig::defaults_for(&env);
        let mut adam = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        adam.ascend(&mut p, &[3.0, -0.01], &cfg);
        // m̂ = g and v̂ = g², so the step is γ·sign(g) up to ε.
        assert!((p[0] - 1e-3).abs() < 1e-10);
        assert!((p[1] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_keeps_policy_but_moves_chains() {
        let env = make_pendulum_linear().with_horizon(4);
        let mut cfg = small(&env);
        cfg.learning_rate = 0.0;
        let mut state = compact_state(&env, &cfg);
        let before = state.clone();
        for _ in 0..4 {
            msc_step(&mut state, &env, &cfg).unwrap();
        }
        assert_eq!(state.policy, before.policy);
        assert_eq!(state.iteration, 4);
        assert_ne!(state.references, before.references);
    }

    #[test]
    fn score_average_is_mean_of_chain_scores() {
        let env = make_pendulum_nonlinear().with_horizon(3);
        let cfg = small(&env);
        let state = compact_state(&env, &cfg);
        // After one step Adam's first moment is (1 − β₁)·Ŝ.
        let mut stepped = state.clone();
        let mut cfg1 = cfg;
        cfg1.learning_rate = 0.0;
        msc_step(&mut stepped, &env, &cfg1).unwrap();
        assert_eq!(stepped.adam.t, 1);
        let recomputed: Vec<f64> = stepped.adam.m.iter().map(|m| m / (1.0 - cfg.beta1)).collect();
        let fresh: Vec<Vec<f64>> = stepped
            .references
            .iter()
            .map(|r| score_estimate(r, &state.policy).unwrap())
            .collect();
        for (i, r) in recomputed.iter().enumerate() {
            let mean = fresh.iter().map(|g| g[i]).sum::<f64>() / fresh.len() as f64;
            assert!((r - mean).abs() <= 1e-9 * (1.0 + mean.abs()), "{i}: {r} vs {mean}");
        }
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let env = make_pendulum_nonlinear().with_horizon(3);
        let cfg = small(&env);
        let (p1, log1) = train(&env, &cfg).unwrap();
        let (p2, log2) = train(&env, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1.len(), 2);
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!((a.eig_estimate, a.eig_std_error), (b.eig_estimate, b.eig_std_error));
        }

        let mut state = init_state(&env, &cfg).unwrap();
        let mut one = cfg;
        one.epochs = 1;
        train_from(&mut state, &env, &one, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        state.save_json(&path).unwrap();
        let mut resumed = TrainState::load_json(&path).unwrap();
        assert_eq!(resumed, state);
        let rest = train_from(&mut resumed, &env, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.policy, p1);
        assert_eq!(rest[0].eig_estimate, log1[1].eig_estimate);
    }

    #[test]
    fn zero_epochs_returns_initial_policy() {
        let env = make_pendulum_linear().with_horizon(3);
        let mut cfg = small(&env);
        cfg.epochs = 0;
        let (p, log) = train(&env, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(p, init_state(&env, &cfg).unwrap().policy);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let env = make_pendulum_linear();
        let mut cfg = TrainConfig::defaults_for(&env);
        cfg.chains = 0;
        assert!(matches!(cfg.validate(&env), Err(Error::Config(_))));
        let nl = make_pendulum_nonlinear();
        let mut cfg = TrainConfig::defaults_for(&nl);
        cfg.smc.mode = InnerMode::Exact;
        assert!(matches!(cfg.validate(&nl), Err(Error::Config(_))));
    }
}
