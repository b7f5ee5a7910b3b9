//! Policy evaluation: Monte Carlo EIG from untempered, unresampled filter
//! runs, the closed-form information-gain trace for conditionally linear
//! models, and the sPCE lower bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Environment, Trajectory};
use crate::policy::{policy_input, random_policy_sample, DesignPolicy, PolicyState};
use crate::posterior::{MhConfig, DEFAULT_ESS_THRESHOLD};
use crate::smc::{run_smc, InnerMode, PotentialConfig, RewardForm, SmcConfig};
use crate::stats::{log_sum_exp, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub l: usize,
    pub n_outer: usize,
    /// Per-rollout `g_L` values.
    pub samples: Vec<f64>,
}

/// Settings of the EIG estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigConfig {
    pub n: usize,
    pub m: usize,
    pub mode: InnerMode,
    pub mh: MhConfig,
    pub ess_threshold: f64,
}

impl EigConfig {
    pub fn new(env: &Environment, n: usize, m: usize, mode: InnerMode) -> Self {
        Self {
            n,
            m,
            mode,
            mh: MhConfig::default_for(env),
            ess_threshold: DEFAULT_ESS_THRESHOLD,
        }
    }

    fn smc(&self) -> SmcConfig {
        SmcConfig {
            n: self.n,
            m: self.m,
            mode: self.mode,
            potential: PotentialConfig {
                eta: 1.0,
                slew_penalty: 0.0,
                reward_form: RewardForm::General,
            },
            mh: self.mh,
            ess_threshold: self.ess_threshold,
            resampling: false,
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample mean and sample standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let (mean, se) = mean_and_std_error(values);
    (mean, se * (values.len() as f64).sqrt())
}

/// `(1/N) Σ_n Σ_t r̂_t(z^n_{0:t})` over histories drawn from the marginal
/// dynamics (resampling off, equal weights).
pub fn estimate_eig(
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &EigConfig,
    rng: &RngStream,
) -> Result<EigEstimate> {
    let out = run_smc(env, policy, &cfg.smc(), rng)?;
    let totals = out.total_rewards();
    let (value, std_error) = mean_and_std_error(&totals);
    Ok(EigEstimate {
        value,
        std_error,
        n: cfg.n,
        m: cfg.m,
    })
}

/// Per-time `(mean, std)` of the cumulative closed-form information gain
/// over `n_rollouts` marginal rollouts; entry 0 is t = 0.
pub fn info_gain_trace_exact(
    env: &Environment,
    policy: DesignPolicy<'_>,
    n_rollouts: usize,
    rng: &RngStream,
) -> Result<Vec<(f64, f64)>> {
    let cfg = EigConfig::new(env, n_rollouts, 0, InnerMode::Exact);
    let out = run_smc(env, policy, &cfg.smc(), rng)?;
    let mut trace = vec![(0.0, 0.0)];
    let mut cumulative = vec![0.0; n_rollouts];
    for t in 0..env.horizon() {
        for (c, r) in cumulative.iter_mut().zip(&out.reward_history) {
            *c += r[t];
        }
        trace.push(mean_and_std(&cumulative));
    }
    Ok(trace)
}

/// Rolls out the policy against the true dynamics at a fixed θ.
pub fn rollout(env: &Environment, policy: DesignPolicy<'_>, theta: &[f64], rng: &mut RngStream) -> Result<Trajectory> {
    let mut traj = Trajectory::new(env.x0().to_vec());
    let mut state = match policy {
        DesignPolicy::Network(p) => {
            p.check_environment(env)?;
            Some(PolicyState::zeros(p.arch(), 1))
        }
        DesignPolicy::Random => None,
    };
    for _ in 0..env.horizon() {
        let last = traj.states.last().expect("state");
        let x = last.x.clone();
        let (design, presquash) = match (policy, state.as_ref()) {
            (DesignPolicy::Network(p), Some(s)) => {
                let input = policy_input(&x, last.design.as_deref(), p.design_dim());
                let (m, next) = p.step_one(s, &input);
                state = Some(next);
                let (xi, sv) = p.sample_from_mean(ndarray::ArrayView1::from(&m), rng);
                (xi, Some(sv))
            }
            _ => (random_policy_sample(env, rng), None),
        };
        let next = env.em_step(&x, &design, theta, rng)?;
        traj.push(next, design, presquash);
    }
    Ok(traj)
}

/// `g_L = log(L+1) − log Σ_{ℓ=0}^{L} exp(ℓℓ_ℓ − ℓℓ_0)` where `ℓℓ_ℓ` is the
/// trajectory log-likelihood under θ_ℓ. The ℓ = 0 term contributes
/// `exp(0)`, so `g_L ≤ log(L+1)` holds exactly in floating point.
pub fn spce_sample(logliks: &[f64]) -> Result<f64> {
    let l0 = logliks[0];
    if !l0.is_finite() {
        return Err(Error::Domain("trajectory has zero likelihood under its own θ".into()));
    }
    let shifted: Vec<f64> = logliks.iter().map(|v| v - l0).collect();
    Ok(((logliks.len()) as f64).ln() - log_sum_exp(&shifted)?)
}

/// sPCE lower bound with `L` contrastive prior draws per rollout.
pub fn spce_bound(
    env: &Environment,
    policy: DesignPolicy<'_>,
    l: usize,
    n_outer: usize,
    rng: &RngStream,
) -> Result<SpceEstimate> {
    if l == 0 || n_outer == 0 {
        return Err(Error::Config("sPCE needs L ≥ 1 and at least one rollout".into()));
    }
    let samples = (0..n_outer)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            let theta0 = env.prior().sample(&mut r);
            let traj = rollout(env, policy, &theta0, &mut r)?;
            let transitions: Vec<_> = traj.transitions().collect();
            let mut logliks = Vec::with_capacity(l + 1);
            logliks.push(env.trajectory_loglik(transitions.iter().copied(), &theta0)?);
            for _ in 0..l {
                let theta = env.prior().sample(&mut r);
                logliks.push(env.trajectory_loglik(transitions.iter().copied(), &theta)?);
            }
            spce_sample(&logliks)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (value, std_error) = mean_and_std_error(&samples);
    Ok(SpceEstimate {
        value,
        std_error,
        l,
        n_outer,
        samples,
    })
}
