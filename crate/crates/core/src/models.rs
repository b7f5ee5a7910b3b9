//! Environments: Euler–Maruyama discretized SDEs with design inputs.
//!
//! Diffusion matrices in these models are rank deficient: noise only enters
//! a subset of the state ("noisy components"). Transition densities are
//! Gaussian over those components, while the remaining components follow
//! their noiseless Euler–Maruyama update.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::{
    cholesky_with_jitter, gaussian_logpdf, gaussian_sample, lognormal_logpdf, lognormal_sample, GaussianSpec,
    LogNormalSpec, RngStream, LN_2PI,
};

/// Largest state dimension handled by the stack buffers in the hot loops.
pub const MAX_STATE_DIM: usize = 16;

/// Tolerance on deterministic components of foreign trajectories.
pub const DETERMINISTIC_TOL: f64 = 1e-9;

const GRAVITY: f64 = 9.81;

/// `drift(x, ξ, θ, out)` writes the SDE drift into `out`.
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Conditionally linear structure of the noisy components:
/// `drift_noisy(x, ξ, θ) = offset(x, ξ) + H(x, ξ) θ`.
/// The closure writes `offset` (length = number of noisy components) and `H`
/// (row-major, noisy × theta_dim).
pub type FeatureFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

/// One augmented state `z_t = {x_t, ξ_{t-1}}`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    /// Design that produced `x` (absent at t = 0).
    pub design: Option<Vec<f64>>,
    /// Pre-squash policy variable behind `design`, when known.
    #[serde(default)]
    pub presquash: Option<Vec<f64>>,
}

impl AugmentedState {
    pub fn initial(x: Vec<f64>) -> Self {
        Self {
            x,
            design: None,
            presquash: None,
        }
    }
}

/// History `z_{0:t}`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trajectory {
    pub states: Vec<AugmentedState>,
}

impl Trajectory {
    pub fn new(x0: Vec<f64>) -> Self {
        Self {
            states: vec![AugmentedState::initial(x0)],
        }
    }

    /// Number of transitions, i.e. `t` for `z_{0:t}`.
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, x: Vec<f64>, design: Vec<f64>, presquash: Option<Vec<f64>>) {
        self.states.push(AugmentedState {
            x,
            design: Some(design),
            presquash,
        });
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.states.first() else {
            return Err(Error::InconsistentTrajectory("empty trajectory".into()));
        };
        if first.design.is_some() {
            return Err(Error::InconsistentTrajectory(
                "initial state must not carry a design".into(),
            ));
        }
        if self.states[1..].iter().any(|s| s.design.is_none()) {
            return Err(Error::InconsistentTrajectory(
                "every state after t = 0 needs a design".into(),
            ));
        }
        Ok(())
    }

    /// `(x_{s-1}, ξ_{s-1}, x_s)` for s = 1..=t.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> {
        self.states.windows(2).map(|w| {
            (
                w[0].x.as_slice(),
                w[1].design.as_deref().unwrap_or(&[]),
                w[1].x.as_slice(),
            )
        })
    }

    pub fn designs(&self) -> impl Iterator<Item = &[f64]> {
        self.states[1..].iter().map(|s| s.design.as_deref().unwrap_or(&[]))
    }
}

/// Parameter prior.
#[derive(Clone, Debug)]
pub enum Prior {
    Gaussian(GaussianSpec),
    LogNormal(LogNormalSpec),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(g) => g.dim(),
            Prior::LogNormal(l) => l.dim(),
        }
    }

    pub fn logpdf(&self, theta: &[f64]) -> Result<f64> {
        match self {
            Prior::Gaussian(g) => gaussian_logpdf(theta, g),
            Prior::LogNormal(l) => lognormal_logpdf(theta, l),
        }
    }

    /// Log-density, `-inf` outside the support.
    pub fn logpdf_or_neg_inf(&self, theta: &[f64]) -> f64 {
        self.logpdf(theta).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        match self {
            Prior::Gaussian(g) => gaussian_sample(g, rng),
            Prior::LogNormal(l) => lognormal_sample(l, rng),
        }
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        match self {
            Prior::Gaussian(_) => theta.iter().all(|t| t.is_finite()),
            Prior::LogNormal(_) => theta.iter().all(|t| t.is_finite() && *t > 0.0),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Prior::Gaussian(_))
    }
}

/// Everything needed to build an [`Environment`].
#[derive(Clone)]
pub struct EnvironmentConfig {
    pub name: String,
    pub state_names: Vec<String>,
    pub design_dim: usize,
    pub theta_dim: usize,
    pub dt: f64,
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub drift: DriftFn,
    /// Diffusion `L`, state_dim × noise_dim.
    pub diffusion: DMatrix<f64>,
    pub prior: Prior,
    pub design_scale: f64,
    pub design_shift: f64,
    pub linear_features: Option<FeatureFn>,
    /// Whether deterministic components are checked against their prediction.
    /// Must be off when those components depend on θ, since particles then
    /// disagree on them by construction.
    pub check_deterministic: bool,
}

/// An immutable environment specification.
#[derive(Clone)]
pub struct Environment {
    name: String,
    state_names: Vec<String>,
    state_dim: usize,
    design_dim: usize,
    theta_dim: usize,
    noise_dim: usize,
    dt: f64,
    horizon: usize,
    x0: Vec<f64>,
    drift: DriftFn,
    diffusion: DMatrix<f64>,
    noisy: Vec<usize>,
    deterministic: Vec<usize>,
    /// Covariance of the noisy components over one step: `(L Lᵀ dt)[noisy, noisy]`.
    noise_cov: DMatrix<f64>,
    noise_chol: DMatrix<f64>,
    noise_log_det: f64,
    prior: Prior,
    design_scale: f64,
    design_shift: f64,
    linear_features: Option<FeatureFn>,
    check_deterministic: bool,
}

impl fmt::Debug for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Environment")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("design_dim", &self.design_dim)
            .field("theta_dim", &self.theta_dim)
            .field("dt", &self.dt)
            .field("horizon", &self.horizon)
            .field("noisy", &self.noisy)
            .finish_non_exhaustive()
    }
}

impl Environment {
    pub fn new(cfg: EnvironmentConfig) -> Result<Self> {
        let state_dim = cfg.x0.len();
        if state_dim == 0 || state_dim > MAX_STATE_DIM {
            return Err(Error::Config(format!(
                "state dimension {state_dim} outside 1..={MAX_STATE_DIM}"
            )));
        }
        if cfg.state_names.len() != state_dim {
            return Err(Error::Dimension {
                expected: state_dim,
                got: cfg.state_names.len(),
            });
        }
        if cfg.diffusion.nrows() != state_dim {
            return Err(Error::Dimension {
                expected: state_dim,
                got: cfg.diffusion.nrows(),
            });
        }
        if !(cfg.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", cfg.dt)));
        }
        if !(cfg.design_scale > 0.0) {
            return Err(Error::Config(format!(
                "design scale must be positive, got {}",
                cfg.design_scale
            )));
        }
        if cfg.prior.dim() != cfg.theta_dim {
            return Err(Error::Dimension {
                expected: cfg.theta_dim,
                got: cfg.prior.dim(),
            });
        }
        let noisy: Vec<usize> = (0..state_dim)
            .filter(|&i| cfg.diffusion.row(i).iter().any(|v| *v != 0.0))
            .collect();
        if noisy.is_empty() {
            return Err(Error::Config(
                "diffusion has no nonzero rows; transition density undefined".into(),
            ));
        }
        let deterministic: Vec<usize> = (0..state_dim).filter(|i| !noisy.contains(i)).collect();
        let full = &cfg.diffusion * cfg.diffusion.transpose() * cfg.dt;
        let k = noisy.len();
        let noise_cov = DMatrix::from_fn(k, k, |i, j| full[(noisy[i], noisy[j])]);
        let noise_chol = cholesky_with_jitter(&noise_cov)?;
        let noise_log_det = 2.0 * noise_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            name: cfg.name,
            state_names: cfg.state_names,
            state_dim,
            design_dim: cfg.design_dim,
            theta_dim: cfg.theta_dim,
            noise_dim: cfg.diffusion.ncols(),
            dt: cfg.dt,
            horizon: cfg.horizon,
            x0: cfg.x0,
            drift: cfg.drift,
            diffusion: cfg.diffusion,
            noisy,
            deterministic,
            noise_cov,
            noise_chol,
            noise_log_det,
            prior: cfg.prior,
            design_scale: cfg.design_scale,
            design_shift: cfg.design_shift,
            linear_features: cfg.linear_features,
            check_deterministic: cfg.check_deterministic,
        })
    }

    /// Same dynamics with a different number of experiments.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut env = self.clone();
        env.horizon = horizon;
        env
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn design_dim(&self) -> usize {
        self.design_dim
    }
    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }
    pub fn prior(&self) -> &Prior {
        &self.prior
    }
    pub fn design_scale(&self) -> f64 {
        self.design_scale
    }
    pub fn design_shift(&self) -> f64 {
        self.design_shift
    }
    pub fn noisy_components(&self) -> &[usize] {
        &self.noisy
    }
    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }
    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }
    pub fn is_conditionally_linear(&self) -> bool {
        self.linear_features.is_some()
    }

    /// Closed design interval `[b - a, b + a]`.
    pub fn design_range(&self) -> (f64, f64) {
        (
            self.design_shift - self.design_scale,
            self.design_shift + self.design_scale,
        )
    }

    pub fn check_design(&self, design: &[f64]) -> Result<()> {
        if design.len() != self.design_dim {
            return Err(Error::Dimension {
                expected: self.design_dim,
                got: design.len(),
            });
        }
        let (lo, hi) = self.design_range();
        if let Some(bad) = design.iter().find(|d| !(**d >= lo && **d <= hi)) {
            return Err(Error::Domain(format!("design {bad} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64], design: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.drift)(x, design, theta, out)
    }

    /// Noiseless Euler–Maruyama prediction `x + drift·dt`.
    pub fn predict(&self, x: &[f64], design: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.drift)(x, design, theta, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + *o * self.dt;
        }
    }

    /// One Euler–Maruyama step: `x' = x + drift·dt + L·√dt·ε`.
    pub fn em_step(&self, x: &[f64], design: &[f64], theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let eps: Vec<f64> = (0..self.noise_dim).map(|_| rng.standard_normal()).collect();
        self.em_step_with_noise(x, design, theta, &eps)
    }

    /// Euler–Maruyama step with the standard normal increment supplied.
    pub fn em_step_with_noise(&self, x: &[f64], design: &[f64], theta: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.check_design(design)?;
        if !self.prior.in_support(theta) {
            return Err(Error::Domain(format!("parameters {theta:?} outside the prior support")));
        }
        let mut next = vec![0.0; self.state_dim];
        self.predict(x, design, theta, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite drift at x = {x:?}, θ = {theta:?}")));
        }
        let sqrt_dt = self.dt.sqrt();
        for (i, n) in next.iter_mut().enumerate() {
            let noise: f64 = (0..self.noise_dim).map(|j| self.diffusion[(i, j)] * eps[j]).sum();
            *n += noise * sqrt_dt;
        }
        Ok(next)
    }

    /// Transition log-density `log f(x_next | x, ξ, θ)` over the noisy components.
    pub fn transition_logpdf(&self, x_next: &[f64], x: &[f64], design: &[f64], theta: &[f64]) -> Result<f64> {
        let mut mean = [0.0; MAX_STATE_DIM];
        let mean = &mut mean[..self.state_dim];
        self.predict(x, design, theta, mean);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite drift at x = {x:?}, θ = {theta:?}")));
        }
        if self.check_deterministic {
            for &i in &self.deterministic {
                let scale = 1.0 + mean[i].abs();
                if (x_next[i] - mean[i]).abs() > DETERMINISTIC_TOL * scale {
                    return Err(Error::InconsistentTrajectory(format!(
                        "component {} is {} but the noiseless update gives {}",
                        self.state_names[i], x_next[i], mean[i]
                    )));
                }
            }
        }
        Ok(self.noisy_logpdf(x_next, mean))
    }

    /// Like [`Self::transition_logpdf`] but maps parameters outside the prior
    /// support or a non-finite drift to `-inf`. Used inside weight updates
    /// where such particles simply carry no mass.
    pub fn transition_logpdf_lenient(&self, x_next: &[f64], x: &[f64], design: &[f64], theta: &[f64]) -> Result<f64> {
        match self.transition_logpdf(x_next, x, design, theta) {
            Ok(v) => Ok(v),
            Err(Error::Domain(_)) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    fn noisy_logpdf(&self, x_next: &[f64], mean: &[f64]) -> f64 {
        let k = self.noisy.len();
        if k == 1 {
            let i = self.noisy[0];
            let sd = self.noise_chol[(0, 0)];
            let z = (x_next[i] - mean[i]) / sd;
            return -0.5 * (LN_2PI + self.noise_log_det + z * z);
        }
        let mut y = [0.0; MAX_STATE_DIM];
        let mut quad = 0.0;
        for a in 0..k {
            let mut acc = x_next[self.noisy[a]] - mean[self.noisy[a]];
            for b in 0..a {
                acc -= self.noise_chol[(a, b)] * y[b];
            }
            y[a] = acc / self.noise_chol[(a, a)];
            quad += y[a] * y[a];
        }
        -0.5 * (k as f64 * LN_2PI + self.noise_log_det + quad)
    }

    /// `Σ_s log f(x_s | x_{s-1}, ξ_{s-1}, θ)` over a list of transitions.
    pub fn trajectory_loglik<'a, I>(&self, transitions: I, theta: &[f64]) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        let mut total = 0.0;
        for (x, design, x_next) in transitions {
            total += self.transition_logpdf_lenient(x_next, x, design, theta)?;
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        Ok(total)
    }

    /// Linear-Gaussian view of one transition for conditionally linear models:
    /// `y = H θ + ε`, `ε ~ N(0, Σ)` on the noisy components.
    pub fn linear_observation(&self, x_next: &[f64], x: &[f64], design: &[f64]) -> Result<LinearObservation> {
        let (offset, h) = self.linear_design_matrix(x, design)?;
        let k = self.noisy.len();
        let y = DVector::from_fn(k, |a, _| {
            let i = self.noisy[a];
            x_next[i] - x[i] - self.dt * offset[a]
        });
        Ok(LinearObservation {
            y,
            h,
            sigma: self.noise_cov.clone(),
        })
    }

    /// `(offset, H_eff)` with `H_eff = dt·H(x, ξ)` so that the noisy increment
    /// `x'_noisy - x_noisy - dt·offset` equals `H_eff θ + ε`.
    pub fn linear_design_matrix(&self, x: &[f64], design: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let features = self
            .linear_features
            .as_ref()
            .ok_or_else(|| Error::Config(format!("environment {} is not conditionally linear", self.name)))?;
        let k = self.noisy.len();
        let mut offset = vec![0.0; k];
        let mut h = vec![0.0; k * self.theta_dim];
        features(x, design, &mut offset, &mut h);
        let h = DMatrix::from_row_slice(k, self.theta_dim, &h) * self.dt;
        Ok((offset, h))
    }

    /// Builds `x_{t+1}` for a conditionally linear model from a sampled
    /// noisy increment `y` (see [`Self::linear_observation`]). Deterministic
    /// components follow their noiseless update, which for these models
    /// does not depend on θ.
    pub fn compose_linear_next(&self, x: &[f64], design: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let (offset, _) = self.linear_design_matrix(x, design)?;
        let theta_ref: Vec<f64> = match &self.prior {
            Prior::Gaussian(g) => g.mean().iter().copied().collect(),
            Prior::LogNormal(l) => l.location().iter().map(|v| v.exp()).collect(),
        };
        let mut next = vec![0.0; self.state_dim];
        self.predict(x, design, &theta_ref, &mut next);
        for (a, &i) in self.noisy.iter().enumerate() {
            next[i] = x[i] + self.dt * offset[a] + y[a];
        }
        Ok(next)
    }
}

/// Linear-Gaussian observation `y = H θ + ε`, `ε ~ N(0, sigma)`.
#[derive(Clone, Debug)]
pub struct LinearObservation {
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

fn pendulum_names() -> Vec<String> {
    vec!["q".into(), "q_dot".into()]
}

/// Conditionally linear pendulum: `q̈ = h(x, ξ)ᵀθ` with `h = (-sin q, -q̇, ξ)`,
/// prior `N((10, 0, 5), I)`.
pub fn make_pendulum_linear() -> Environment {
    let drift: DriftFn = Arc::new(|x, u, th, out| {
        out[0] = x[1];
        out[1] = -x[0].sin() * th[0] - x[1] * th[1] + u[0] * th[2];
    });
    let features: FeatureFn = Arc::new(|x, u, offset, h| {
        offset[0] = 0.0;
        h[0] = -x[0].sin();
        h[1] = -x[1];
        h[2] = u[0];
    });
    let prior = GaussianSpec::isotropic(&[10.0, 0.0, 5.0], 1.0).expect("identity covariance");
    Environment::new(EnvironmentConfig {
        name: "pendulum_linear".into(),
        state_names: pendulum_names(),
        design_dim: 1,
        theta_dim: 3,
        dt: 0.05,
        horizon: 50,
        x0: vec![0.0, 0.0],
        drift,
        diffusion: DMatrix::from_column_slice(2, 1, &[0.0, 0.1]),
        prior: Prior::Gaussian(prior),
        design_scale: 2.5,
        design_shift: 0.0,
        linear_features: Some(features),
        check_deterministic: true,
    })
    .expect("valid pendulum specification")
}

/// Non-linear pendulum with θ = (m, l), drag d = 1e-3 and a log-normal prior.
pub fn make_pendulum_nonlinear() -> Environment {
    const DRAG: f64 = 1e-3;
    let drift: DriftFn = Arc::new(|x, u, th, out| {
        let (m, l) = (th[0], th[1]);
        out[0] = x[1];
        out[1] = -1.5 * GRAVITY / l * x[0].sin() + (u[0] - DRAG * x[1]) / (m * l * l);
    });
    let prior = LogNormalSpec::isotropic(&[0.0, 0.0], 0.25).expect("diagonal covariance");
    Environment::new(EnvironmentConfig {
        name: "pendulum_nonlinear".into(),
        state_names: pendulum_names(),
        design_dim: 1,
        theta_dim: 2,
        dt: 0.05,
        horizon: 50,
        x0: vec![0.0, 0.0],
        drift,
        diffusion: DMatrix::from_column_slice(2, 1, &[0.0, 0.1]),
        prior: Prior::LogNormal(prior),
        design_scale: 2.5,
        design_shift: 0.0,
        linear_features: None,
        check_deterministic: true,
    })
    .expect("valid pendulum specification")
}

/// Cart-pole with θ = (m_p, l), cart mass 2 and noise on the cart velocity.
///
/// State order is `(s, q, ṡ, q̇)`. The pole velocity update depends on θ and
/// has no noise, so deterministic components are not checked: the transition
/// density covers the cart velocity alone.
pub fn make_cartpole() -> Environment {
    const CART_MASS: f64 = 2.0;
    let drift: DriftFn = Arc::new(|x, u, th, out| {
        let (mp, l) = (th[0], th[1]);
        let (q, s_dot, q_dot) = (x[1], x[2], x[3]);
        let (sin_q, cos_q) = q.sin_cos();
        let denom = CART_MASS + mp * sin_q * sin_q;
        out[0] = s_dot;
        out[1] = q_dot;
        out[2] = (u[0] + mp * sin_q * (l * q_dot * q_dot + GRAVITY * cos_q)) / denom;
        out[3] =
            (-u[0] * cos_q - mp * l * q_dot * q_dot * cos_q * sin_q - (CART_MASS + mp) * GRAVITY * sin_q) / (l * denom);
    });
    let prior = LogNormalSpec::isotropic(&[0.2, 0.2], 0.04).expect("diagonal covariance");
    Environment::new(EnvironmentConfig {
        name: "cartpole".into(),
        state_names: vec!["s".into(), "q".into(), "s_dot".into(), "q_dot".into()],
        design_dim: 1,
        theta_dim: 2,
        dt: 0.05,
        horizon: 50,
        x0: vec![0.0; 4],
        drift,
        diffusion: DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.1, 0.0]),
        prior: Prior::LogNormal(prior),
        design_scale: 5.0,
        design_shift: 0.0,
        linear_features: None,
        check_deterministic: false,
    })
    .expect("valid cart-pole specification")
}

pub const ENVIRONMENT_NAMES: [&str; 3] = ["pendulum_linear", "pendulum_nonlinear", "cartpole"];

/// Looks up one of the built-in environments.
pub fn environment_by_name(name: &str) -> Result<Environment> {
    match name {
        "pendulum_linear" => Ok(make_pendulum_linear()),
        "pendulum_nonlinear" => Ok(make_pendulum_nonlinear()),
        "cartpole" => Ok(make_cartpole()),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (expected one of {})",
            ENVIRONMENT_NAMES.join(", ")
        ))),
    }
}

/// Small synthetic environments used for sanity checks.
pub mod toy {
    use super::*;

    /// Scalar model `x' = x + θ·h·dt + σ√dt·ε` with a single experiment and a
    /// Gaussian prior `N(prior_mean, prior_var)`. Its one-step mutual
    /// information is `0.5·log(1 + (h dt)² prior_var / (σ² dt))`.
    pub fn scalar_linear(h: f64, prior_mean: f64, prior_var: f64, noise_sd: f64) -> Environment {
        let drift: DriftFn = Arc::new(move |_x, _u, th, out| {
            out[0] = h * th[0];
        });
        let features: FeatureFn = Arc::new(move |_x, _u, offset, hm| {
            offset[0] = 0.0;
            hm[0] = h;
        });
        Environment::new(EnvironmentConfig {
            name: "scalar_linear".into(),
            state_names: vec!["x".into()],
            design_dim: 1,
            theta_dim: 1,
            dt: 1.0,
            horizon: 1,
            x0: vec![0.0],
            drift,
            diffusion: DMatrix::from_element(1, 1, noise_sd),
            prior: Prior::Gaussian(GaussianSpec::isotropic(&[prior_mean], prior_var).expect("positive variance")),
            design_scale: 1.0,
            design_shift: 0.0,
            linear_features: Some(features),
            check_deterministic: true,
        })
        .expect("valid toy specification")
    }

    /// Damped oscillator driven by the design whose dynamics ignore θ.
    pub fn theta_free(horizon: usize) -> Environment {
        let drift: DriftFn = Arc::new(|x, u, _th, out| {
            out[0] = x[1];
            out[1] = -x[0] - 0.1 * x[1] + u[0];
        });
        Environment::new(EnvironmentConfig {
            name: "theta_free".into(),
            state_names: vec!["q".into(), "q_dot".into()],
            design_dim: 1,
            theta_dim: 2,
            dt: 0.05,
            horizon,
            x0: vec![0.0, 0.0],
            drift,
            diffusion: DMatrix::from_column_slice(2, 1, &[0.0, 0.1]),
            prior: Prior::LogNormal(LogNormalSpec::isotropic(&[0.0, 0.0], 0.25).expect("diagonal covariance")),
            design_scale: 2.5,
            design_shift: 0.0,
            linear_features: None,
            check_deterministic: true,
        })
        .expect("valid toy specification")
    }
}
