use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use iosmc::eval::{estimate_eig, info_gain_trace_exact, mean_and_std, rollout, spce_bound};
use iosmc::models::Environment;
use iosmc::policy::{DesignPolicy, PolicyParameters};
use iosmc::smc::write_trajectory_csv;
use iosmc::stats::RngStream;
use iosmc::training::{init_state, train_from, EpochMetrics, TrainState};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const POLICY_FILE: &str = "policy.json";
pub const STATE_FILE: &str = "train_state.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_HEADER: &str = "epoch,eig_estimate,eig_std_error,mean_acceptance_rate";
pub const REPORT_HEADER: &str = "policy_id,env,metric,rep,value,std_error,N,M,L,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Eig,
    Spce,
    IgTrace,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Eig => "eig",
            Metric::Spce => "spce",
            Metric::IgTrace => "ig_trace",
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn append(path: &Path, line: &str) -> CliResult<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(CliError::io(path))?;
    writeln!(f, "{line}").map_err(CliError::io(path))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Trains a policy, writing the resolved config, per-epoch metrics and
/// checkpoints into the output directory. With `resume`, continues from the
/// saved training state.
pub fn train(cfg: &RunConfig, resume: bool) -> CliResult<PathBuf> {
    let env = cfg.environment()?;
    let tc = cfg.train_config();
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let state_path = dir.join(STATE_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let mut state = if resume {
        TrainState::load_json(&state_path)?
    } else {
        write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
        write_file(&timing_path, "epoch,wall_clock_seconds\n")?;
        init_state(&env, &tc)?
    };
    let policy_path = dir.join(POLICY_FILE);
    train_from(&mut state, &env, &tc, |st, m: &EpochMetrics| {
        append(
            &metrics_path,
            &format!(
                "{},{},{},{}",
                m.epoch, m.eig_estimate, m.eig_std_error, m.mean_acceptance_rate
            ),
        )
        .map_err(to_core)?;
        append(&timing_path, &format!("{},{:.3}", m.epoch, m.wall_clock_seconds)).map_err(to_core)?;
        st.save_json(&state_path)?;
        st.policy.save_json(&policy_path)
    })?;
    state.policy.save_json(&policy_path)?;
    state.save_json(&state_path)?;
    Ok(policy_path)
}

fn to_core(e: CliError) -> iosmc::Error {
    match e {
        CliError::Io { source, .. } => iosmc::Error::Io(source),
        CliError::Core(e) => e,
        CliError::Config(m) => iosmc::Error::Config(m),
    }
}

/// `random` or a policy checkpoint checked against `env`.
pub struct LoadedPolicy {
    pub id: String,
    pub params: Option<PolicyParameters>,
}

impl LoadedPolicy {
    pub fn load(spec: &str, env: &Environment, mean_policy: bool) -> CliResult<Self> {
        if spec == "random" {
            return Ok(Self {
                id: "random".into(),
                params: None,
            });
        }
        let path = Path::new(spec);
        let params = PolicyParameters::load_json(path).map_err(|e| match e {
            iosmc::Error::Io(source) => CliError::Io {
                path: path.to_path_buf(),
                source,
            },
            e => CliError::Config(format!("{}: not a policy checkpoint: {e}", path.display())),
        })?;
        params
            .check_environment(env)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.into());
        Ok(Self {
            id,
            params: Some(if mean_policy { params.mean_policy() } else { params }),
        })
    }

    pub fn design_policy(&self) -> DesignPolicy<'_> {
        match &self.params {
            Some(p) => DesignPolicy::Network(p),
            None => DesignPolicy::Random,
        }
    }
}

/// Evaluates a policy; returns the path of the report CSV.
pub fn eval(cfg: &RunConfig, checkpoint: &str, metric: Metric, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let env = cfg.environment()?;
    let policy = LoadedPolicy::load(checkpoint, &env, cfg.eval.mean_policy)?;
    create_dir(&cfg.output_dir)?;
    let report_path = out.unwrap_or_else(|| cfg.output_dir.join(format!("eval_{}.csv", metric.label())));
    let mut report = format!("{REPORT_HEADER}\n");
    let mut row = |rep: &str, value: f64, se: f64, n: usize, m: usize, l: usize, seed: &str| {
        let _ = writeln!(
            report,
            "{},{},{},{rep},{value},{se},{n},{m},{l},{seed}",
            policy.id,
            env.name(),
            metric.label()
        );
    };
    let mut values = Vec::new();
    match metric {
        Metric::Eig => {
            let ec = cfg.eig_config();
            let m = if ec.mode == iosmc::smc::InnerMode::Exact {
                0
            } else {
                ec.m
            };
            for rep in 0..cfg.eval.reps {
                let seed = cfg.seed + rep as u64;
                let est = estimate_eig(&env, policy.design_policy(), &ec, &RngStream::from_seed(seed))?;
                row(
                    &rep.to_string(),
                    est.value,
                    est.std_error,
                    ec.n,
                    m,
                    0,
                    &seed.to_string(),
                );
                values.push(est.value);
            }
            let (mean, sd) = mean_and_std(&values);
            row("summary", mean, sd, ec.n, m, 0, &cfg.seed.to_string());
        }
        Metric::Spce => {
            let (l, n_outer) = (cfg.eval.l, cfg.eval.n_outer);
            let bound = ((l + 1) as f64).ln();
            for rep in 0..cfg.eval.reps {
                let seed = cfg.seed + rep as u64;
                let est = spce_bound(&env, policy.design_policy(), l, n_outer, &RngStream::from_seed(seed))?;
                debug_assert!(est.samples.iter().all(|g| *g <= bound));
                row(
                    &rep.to_string(),
                    est.value,
                    est.std_error,
                    n_outer,
                    0,
                    l,
                    &seed.to_string(),
                );
                values.push(est.value);
            }
            let (mean, sd) = mean_and_std(&values);
            row("summary", mean, sd, n_outer, 0, l, &cfg.seed.to_string());
        }
        Metric::IgTrace => {
            if !env.is_conditionally_linear() {
                return Err(CliError::Config(format!(
                    "key `environment`: the information-gain trace needs a conditionally linear model, `{}` is not",
                    env.name()
                )));
            }
            let n = cfg.eval.rollouts;
            let trace = info_gain_trace_exact(&env, policy.design_policy(), n, &RngStream::from_seed(cfg.seed))?;
            let mut text = String::from("t,mean,std\n");
            for (t, (mean, sd)) in trace.iter().enumerate().skip(1) {
                let _ = writeln!(text, "{t},{mean},{sd}");
            }
            write_file(&cfg.output_dir.join("ig_trace.csv"), &text)?;
            let (mean, sd) = *trace.last().expect("trace has t = 0");
            row("0", mean, sd / (n as f64).sqrt(), n, 0, 0, &cfg.seed.to_string());
            values.push(mean);
            row("summary", mean, sd, n, 0, 0, &cfg.seed.to_string());
        }
    }
    write_file(&report_path, &report)?;
    let (mean, sd) = mean_and_std(&values);
    println!(
        "{} {}: {mean:.4} ± {sd:.4} ({} reps)",
        policy.id,
        metric.label(),
        values.len()
    );
    Ok(report_path)
}

/// Rolls out `count` experiments and writes one CSV per trajectory plus the
/// θ used for each.
pub fn simulate(cfg: &RunConfig, checkpoint: &str, count: usize, theta: Option<Vec<f64>>) -> CliResult<Vec<PathBuf>> {
    let env = cfg.environment()?;
    let policy = LoadedPolicy::load(checkpoint, &env, cfg.eval.mean_policy)?;
    if let Some(t) = &theta {
        if t.len() != env.theta_dim() {
            return Err(CliError::Config(format!(
                "--theta needs {} values for `{}`, got {}",
                env.theta_dim(),
                env.name(),
                t.len()
            )));
        }
    }
    create_dir(&cfg.output_dir)?;
    let root = RngStream::from_seed(cfg.seed);
    let mut theta_csv = String::from("trajectory");
    for i in 0..env.theta_dim() {
        let _ = write!(theta_csv, ",theta_{i}");
    }
    theta_csv.push('\n');
    let mut paths = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = root.derive(k as u64);
        let th = theta.clone().unwrap_or_else(|| env.prior().sample(&mut rng));
        let traj = rollout(&env, policy.design_policy(), &th, &mut rng)?;
        let path = cfg.output_dir.join(format!("trajectory_{k:04}.csv"));
        write_trajectory_csv(&path, &env, &traj, None)?;
        let _ = writeln!(
            theta_csv,
            "{k},{}",
            th.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        paths.push(path);
    }
    write_file(&cfg.output_dir.join("theta.csv"), &theta_csv)?;
    Ok(paths)
}
