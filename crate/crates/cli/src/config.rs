//! Run configuration: TOML file layered over per-environment defaults, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use iosmc::eval::EigConfig;
use iosmc::models::{environment_by_name, Environment, ENVIRONMENT_NAMES};
use iosmc::posterior::{MhConfig, ProposalFamily};
use iosmc::smc::{InnerMode, PotentialConfig, RewardForm, SmcConfig};
use iosmc::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "IOSMC_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: String,
    pub mode: InnerMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainSection,
    pub smc: SmcSection,
    pub potential: PotentialSection,
    pub mh: MhSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub chains: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    pub n: usize,
    pub m: usize,
    pub ess_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub eta: f64,
    pub slew_penalty: f64,
    pub reward_form: RewardForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhSection {
    pub proposal: ProposalFamily,
    pub step_scale: f64,
    pub num_moves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub m: usize,
    /// Contrastive samples for sPCE.
    pub l: usize,
    /// Outer rollouts per sPCE estimate.
    pub n_outer: usize,
    /// Rollouts for the closed-form information-gain trace.
    pub rollouts: usize,
    pub reps: usize,
    /// Evaluate with the sampling variance at its minimum.
    pub mean_policy: bool,
}

/// File layer: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    environment: Option<String>,
    mode: Option<InnerMode>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    train: TrainFile,
    #[serde(default)]
    smc: SmcFile,
    #[serde(default)]
    potential: PotentialFile,
    #[serde(default)]
    mh: MhFile,
    #[serde(default)]
    eval: EvalFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    steps_per_epoch: Option<usize>,
    chains: Option<usize>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    init_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SmcFile {
    n: Option<usize>,
    m: Option<usize>,
    ess_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialFile {
    eta: Option<f64>,
    slew_penalty: Option<f64>,
    reward_form: Option<RewardForm>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MhFile {
    proposal: Option<ProposalFamily>,
    step_scale: Option<f64>,
    num_moves: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    n: Option<usize>,
    m: Option<usize>,
    l: Option<usize>,
    n_outer: Option<usize>,
    rollouts: Option<usize>,
    reps: Option<usize>,
    mean_policy: Option<bool>,
}

/// Values given on the command line; each wins over the file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Environment: pendulum_linear | pendulum_nonlinear | cartpole.
    #[arg(long = "env")]
    pub environment: Option<String>,
    /// Inner posterior: ibis | exact.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<InnerMode>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Score-climbing steps per epoch.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Independent CSMC chains averaged per step.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Outer particles N.
    #[arg(long = "n")]
    pub n: Option<usize>,
    /// Inner θ particles M.
    #[arg(long = "m")]
    pub m: Option<usize>,
    /// Tempering η.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Penalty λ on squared design changes.
    #[arg(long)]
    pub slew_penalty: Option<f64>,
    /// MH moves per IBIS rejuvenation.
    #[arg(long)]
    pub ibis_moves: Option<usize>,
    /// MH random-walk step scale.
    #[arg(long)]
    pub mh_step: Option<f64>,
    /// Outer particles for EIG evaluation.
    #[arg(long)]
    pub eval_n: Option<usize>,
    /// Inner particles for EIG evaluation.
    #[arg(long)]
    pub eval_m: Option<usize>,
    /// Contrastive samples for sPCE.
    #[arg(long = "L", alias = "l")]
    pub l: Option<usize>,
    /// Outer samples per sPCE repetition.
    #[arg(long)]
    pub n_outer: Option<usize>,
    /// Rollouts for the information-gain trace.
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Independent evaluation repetitions.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Evaluate the stochastic policy instead of the mean policy.
    #[arg(long)]
    pub stochastic: bool,
}

fn parse_mode(s: &str) -> Result<InnerMode, String> {
    match s {
        "ibis" => Ok(InnerMode::Ibis),
        "exact" => Ok(InnerMode::Exact),
        _ => Err(format!("expected `ibis` or `exact`, got `{s}`")),
    }
}

impl RunConfig {
    /// Reference settings for a built-in environment.
    pub fn defaults_for(env: &Environment) -> Self {
        let t = TrainConfig::defaults_for(env);
        Self {
            environment: env.name().to_string(),
            mode: t.smc.mode,
            seed: 0,
            output_dir: default_output_dir(),
            train: TrainSection {
                epochs: t.epochs,
                steps_per_epoch: t.steps_per_epoch,
                chains: t.chains,
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                adam_eps: t.adam_eps,
                init_scale: t.init_scale,
            },
            smc: SmcSection {
                n: t.smc.n,
                m: t.smc.m,
                ess_threshold: t.smc.ess_threshold,
            },
            potential: PotentialSection {
                eta: t.smc.potential.eta,
                slew_penalty: t.smc.potential.slew_penalty,
                reward_form: t.smc.potential.reward_form,
            },
            mh: MhSection {
                proposal: t.smc.mh.proposal,
                step_scale: t.smc.mh.step_scale,
                num_moves: t.smc.mh.num_moves,
            },
            eval: EvalSection {
                n: t.eval.n,
                m: t.eval.m,
                l: 1023,
                n_outer: 64,
                rollouts: 512,
                reps: 25,
                mean_policy: true,
            },
        }
    }

    /// Resolves defaults ← file ← overrides. `seed` and `output_dir` flags
    /// are global and passed separately.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &Overrides,
        seed: Option<u64>,
        output_dir: Option<&Path>,
    ) -> CliResult<Self> {
        let parsed = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
                toml::from_str::<ConfigFile>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?
            }
            None => ConfigFile::default(),
        };
        let name = overrides
            .environment
            .clone()
            .or(parsed.environment.clone())
            .ok_or_else(|| {
                CliError::Config(format!(
                    "missing key `environment` (set it in the config file or pass --env; one of {})",
                    ENVIRONMENT_NAMES.join(", ")
                ))
            })?;
        let env = environment_by_name(&name).map_err(|_| {
            CliError::Config(format!(
                "key `environment`: unknown environment `{name}` (expected one of {})",
                ENVIRONMENT_NAMES.join(", ")
            ))
        })?;
        let mut c = Self::defaults_for(&env);
        c.apply_file(parsed);
        c.apply_overrides(overrides);
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(dir) = output_dir {
            c.output_dir = dir.to_path_buf();
        }
        c.validate()?;
        Ok(c)
    }

    fn apply_file(&mut self, f: ConfigFile) {
        fn set<T>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut self.mode, f.mode);
        set(&mut self.seed, f.seed);
        set(&mut self.output_dir, f.output_dir);
        let (t, tf) = (&mut self.train, f.train);
        set(&mut t.epochs, tf.epochs);
        set(&mut t.steps_per_epoch, tf.steps_per_epoch);
        set(&mut t.chains, tf.chains);
        set(&mut t.learning_rate, tf.learning_rate);
        set(&mut t.beta1, tf.beta1);
        set(&mut t.beta2, tf.beta2);
        set(&mut t.adam_eps, tf.adam_eps);
        set(&mut t.init_scale, tf.init_scale);
        set(&mut self.smc.n, f.smc.n);
        set(&mut self.smc.m, f.smc.m);
        set(&mut self.smc.ess_threshold, f.smc.ess_threshold);
        set(&mut self.potential.eta, f.potential.eta);
        set(&mut self.potential.slew_penalty, f.potential.slew_penalty);
        set(&mut self.potential.reward_form, f.potential.reward_form);
        set(&mut self.mh.proposal, f.mh.proposal);
        set(&mut self.mh.step_scale, f.mh.step_scale);
        set(&mut self.mh.num_moves, f.mh.num_moves);
        let (e, ef) = (&mut self.eval, f.eval);
        set(&mut e.n, ef.n);
        set(&mut e.m, ef.m);
        set(&mut e.l, ef.l);
        set(&mut e.n_outer, ef.n_outer);
        set(&mut e.rollouts, ef.rollouts);
        set(&mut e.reps, ef.reps);
        set(&mut e.mean_policy, ef.mean_policy);
    }

    fn apply_overrides(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut self.mode, &o.mode);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.steps_per_epoch, &o.steps_per_epoch);
        set(&mut self.train.chains, &o.chains);
        set(&mut self.train.learning_rate, &o.learning_rate);
        set(&mut self.smc.n, &o.n);
        set(&mut self.smc.m, &o.m);
        set(&mut self.potential.eta, &o.eta);
        set(&mut self.potential.slew_penalty, &o.slew_penalty);
        set(&mut self.mh.num_moves, &o.ibis_moves);
        set(&mut self.mh.step_scale, &o.mh_step);
        set(&mut self.eval.n, &o.eval_n);
        set(&mut self.eval.m, &o.eval_m);
        set(&mut self.eval.l, &o.l);
        set(&mut self.eval.n_outer, &o.n_outer);
        set(&mut self.eval.rollouts, &o.rollouts);
        set(&mut self.eval.reps, &o.reps);
        if o.stochastic {
            self.eval.mean_policy = false;
        }
    }

    pub fn environment(&self) -> CliResult<Environment> {
        environment_by_name(&self.environment)
            .map_err(|_| CliError::Config(format!("key `environment`: unknown environment `{}`", self.environment)))
    }

    fn validate(&self) -> CliResult<()> {
        let env = self.environment()?;
        let keyed = |key: &str, e: iosmc::Error| CliError::Config(format!("key `{key}`: {e}"));
        if self.mode == InnerMode::Exact && !env.is_conditionally_linear() {
            return Err(CliError::Config(format!(
                "key `mode`: exact mode needs a conditionally linear environment, `{}` is not",
                self.environment
            )));
        }
        self.train_config().validate(&env).map_err(|e| keyed("train", e))?;
        let positive = [
            ("eval.l", self.eval.l),
            ("eval.n_outer", self.eval.n_outer),
            ("eval.rollouts", self.eval.rollouts),
            ("eval.reps", self.eval.reps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("key `{key}` must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn mh_config(&self) -> MhConfig {
        MhConfig {
            step_scale: self.mh.step_scale,
            num_moves: self.mh.num_moves,
            proposal: self.mh.proposal,
        }
    }

    pub fn eig_config(&self) -> EigConfig {
        EigConfig {
            n: self.eval.n,
            m: self.eval.m,
            mode: self.mode,
            mh: self.mh_config(),
            ess_threshold: self.smc.ess_threshold,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            chains: t.chains,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            smc: SmcConfig {
                n: self.smc.n,
                m: self.smc.m,
                mode: self.mode,
                potential: PotentialConfig {
                    eta: self.potential.eta,
                    slew_penalty: self.potential.slew_penalty,
                    reward_form: self.potential.reward_form,
                },
                mh: self.mh_config(),
                ess_threshold: self.smc.ess_threshold,
                resampling: true,
            },
            eval: self.eig_config(),
            init_scale: t.init_scale,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
}
