//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! Criterion 11 (cart-pole) is long; it runs only when
//! `IOSMC_ACCEPTANCE_EXTENDED` is `full` or `reduced`. `IOSMC_ACCEPTANCE_ONLY`
//! takes a comma-separated list of criterion ids to run.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use iosmc::csmc::{csmc_kernel, initial_reference, ks_p_value, ks_statistic};
use iosmc::eval::{estimate_eig, mean_and_std_error, spce_bound, EigConfig};
use iosmc::models::{make_pendulum_linear, make_pendulum_nonlinear, toy, Trajectory};
use iosmc::policy::{random_policy_sample, DesignPolicy, PolicyArch, PolicyParameters};
use iosmc::posterior::{
    conjugate_update, conjugate_update_obs, ibis_step, ConjugatePosterior, MhConfig, ThetaParticleSet,
};
use iosmc::smc::{InnerMode, PotentialConfig, ReferenceTrajectory, SmcConfig};
use iosmc::stats::{weighted_mean_cov, RngStream};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> (String, bool) {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let line = format!(
        "criterion {id:>2} {name}: {} | {} ({:.1}s)",
        if res.pass { "PASS" } else { "FAIL" },
        res.detail,
        start.elapsed().as_secs_f64()
    );
    println!("{line}");
    (line, res.pass)
}

// ---------------------------------------------------------------------------
// 1. Closed-form posterior against dense-grid Bayes rule.

fn grid_posterior_1d(m0: f64, p0: f64, obs: &[(f64, f64, f64)]) -> (f64, f64) {
    let sd = p0.sqrt();
    let n = 40_001;
    let (lo, hi) = (m0 - 12.0 * sd, m0 + 12.0 * sd);
    let step = (hi - lo) / (n - 1) as f64;
    let logp: Vec<f64> = (0..n)
        .map(|i| {
            let th = lo + i as f64 * step;
            let mut l = -0.5 * (th - m0).powi(2) / p0;
            for &(h, var, y) in obs {
                l += -0.5 * (y - h * th).powi(2) / var;
            }
            l
        })
        .collect();
    let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean = w
        .iter()
        .enumerate()
        .map(|(i, w)| w * (lo + i as f64 * step))
        .sum::<f64>()
        / z;
    let var = w
        .iter()
        .enumerate()
        .map(|(i, w)| w * (lo + i as f64 * step - mean).powi(2))
        .sum::<f64>()
        / z;
    (mean, var)
}

fn grid_posterior_2d(m0: &[f64; 2], p0: &[[f64; 2]; 2], obs: &[([f64; 2], f64, f64)]) -> ([f64; 2], [f64; 3]) {
    let det = p0[0][0] * p0[1][1] - p0[0][1] * p0[1][0];
    let inv = [[p0[1][1] / det, -p0[0][1] / det], [-p0[1][0] / det, p0[0][0] / det]];
    let n = 1201;
    let sd = [p0[0][0].sqrt(), p0[1][1].sqrt()];
    let lo = [m0[0] - 10.0 * sd[0], m0[1] - 10.0 * sd[1]];
    let step = [20.0 * sd[0] / (n - 1) as f64, 20.0 * sd[1] / (n - 1) as f64];
    let mut logp = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let th = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
            let d = [th[0] - m0[0], th[1] - m0[1]];
            let mut l =
                -0.5 * (d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]));
            for &(h, var, y) in obs {
                l += -0.5 * (y - h[0] * th[0] - h[1] * th[1]).powi(2) / var;
            }
            logp.push(l);
        }
    }
    let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s0, mut s1) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = (logp[i * n + j] - max).exp();
            z += w;
            s0 += w * (lo[0] + i as f64 * step[0]);
            s1 += w * (lo[1] + j as f64 * step[1]);
        }
    }
    let mean = [s0 / z, s1 / z];
    let (mut c00, mut c01, mut c11) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = (logp[i * n + j] - max).exp() / z;
            let d = [
                lo[0] + i as f64 * step[0] - mean[0],
                lo[1] + j as f64 * step[1] - mean[1],
            ];
            c00 += w * d[0] * d[0];
            c01 += w * d[0] * d[1];
            c11 += w * d[1] * d[1];
        }
    }
    (mean, [c00, c01, c11])
}

fn conjugacy_oracle() -> Outcome {
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for seed in 0..3 {
        let mut rng = RngStream::from_seed(100 + seed);
        let mut u = |a: f64, b: f64| a + (b - a) * rng.uniform();

        let (m0, p0) = (u(-1.0, 1.0), u(0.5, 2.0));
        let theta = m0 + p0.sqrt() * u(-1.5, 1.5);
        let obs: Vec<(f64, f64, f64)> = (0..10)
            .map(|_| {
                let h = u(-2.0, 2.0);
                let var = u(0.3, 2.0);
                (h, var, h * theta + var.sqrt() * u(-1.7, 1.7))
            })
            .collect();
        let mut post = ConjugatePosterior::new(DVector::from_element(1, m0), DMatrix::from_element(1, 1, p0));
        for &(h, var, y) in &obs {
            post = conjugate_update(
                &post,
                &DVector::from_element(1, y),
                &DMatrix::from_element(1, 1, h),
                &DMatrix::from_element(1, 1, var),
            )
            .unwrap();
        }
        let (gm, gv) = grid_posterior_1d(m0, p0, &obs);
        worst_mean = worst_mean.max((post.mean[0] - gm).abs());
        worst_var = worst_var.max(((post.cov[(0, 0)] - gv) / gv).abs());

        let m0 = [u(-1.0, 1.0), u(-1.0, 1.0)];
        let (a, b) = (u(0.5, 1.5), u(0.5, 1.5));
        let rho = u(-0.6, 0.6);
        let p0 = [[a, rho * (a * b).sqrt()], [rho * (a * b).sqrt(), b]];
        let theta = [m0[0] + u(-1.0, 1.0), m0[1] + u(-1.0, 1.0)];
        let obs: Vec<([f64; 2], f64, f64)> = (0..10)
            .map(|_| {
                let h = [u(-2.0, 2.0), u(-2.0, 2.0)];
                let var = u(0.3, 2.0);
                (h, var, h[0] * theta[0] + h[1] * theta[1] + var.sqrt() * u(-1.7, 1.7))
            })
            .collect();
        let mut post = ConjugatePosterior::new(
            DVector::from_row_slice(&m0),
            DMatrix::from_row_slice(2, 2, &[p0[0][0], p0[0][1], p0[1][0], p0[1][1]]),
        );
        for &(h, var, y) in &obs {
            post = conjugate_update(
                &post,
                &DVector::from_element(1, y),
                &DMatrix::from_row_slice(1, 2, &h),
                &DMatrix::from_element(1, 1, var),
            )
            .unwrap();
        }
        let (gm, gc) = grid_posterior_2d(&m0, &p0, &obs);
        for k in 0..2 {
            worst_mean = worst_mean.max((post.mean[k] - gm[k]).abs());
        }
        worst_var = worst_var
            .max(((post.cov[(0, 0)] - gc[0]) / gc[0]).abs())
            .max(((post.cov[(1, 1)] - gc[2]) / gc[2]).abs())
            .max((post.cov[(0, 1)] - gc[1]).abs() / (gc[0] * gc[2]).sqrt());
    }
    outcome(
        worst_mean <= 1e-3 && worst_var <= 1e-3,
        format!("max |Δmean| {worst_mean:.2e}, max rel |Δvar| {worst_var:.2e} (1-d and 2-d, 3 seeds)"),
    )
}

// ---------------------------------------------------------------------------
// 2. IBIS tracks the closed-form posterior.

fn ibis_correctness() -> Outcome {
    let env = make_pendulum_linear().with_horizon(20);
    // One fixed random-policy trajectory and its closed-form posterior.
    let mut rng = RngStream::from_seed(200);
    let theta = env.prior().sample(&mut rng);
    let mut traj = Trajectory::new(env.x0().to_vec());
    let mut exact = ConjugatePosterior::from_prior(env.prior()).unwrap();
    for _ in 0..env.horizon() {
        let x = traj.states.last().unwrap().x.clone();
        let xi = random_policy_sample(&env, &mut rng);
        let next = env.em_step(&x, &xi, &theta, &mut rng).unwrap();
        exact = conjugate_update_obs(&exact, &env.linear_observation(&next, &x, &xi).unwrap()).unwrap();
        traj.push(next, xi, None);
    }

    // A single random-walk move leaves resampled duplicates correlated and
    // shrinks the spread; three moves per rejuvenation decorrelate them.
    let mh = MhConfig::gaussian(0.1, 3);
    let seeds = 10;
    let mut mean_err = [0.0; 3];
    let mut cov_err = 0.0;
    for seed in 0..seeds {
        let mut rng = RngStream::from_seed(9000 + seed);
        let mut set = ThetaParticleSet::from_prior(env.prior(), 2048, &mut rng);
        let mut prefix = Trajectory::new(env.x0().to_vec());
        for s in &traj.states[1..] {
            prefix.push(s.x.clone(), s.design.clone().unwrap(), None);
            set = ibis_step(&prefix, &set, &env, &mh, 0.75, &mut rng).unwrap().0;
        }
        let w = set.weights().unwrap();
        let (m, c) = weighted_mean_cov(&set.particles, set.dim, &w);
        for k in 0..3 {
            mean_err[k] += (m[k] - exact.mean[k]).abs() / seeds as f64;
        }
        cov_err += (&c - &exact.cov).norm() / exact.cov.norm() / seeds as f64;
    }
    let worst = mean_err.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 0.1 && cov_err <= 0.15,
        format!(
            "mean |error| per coordinate {:.3}/{:.3}/{:.3}, covariance Frobenius rel. error {:.3} (M=2048, T=20, 10 IBIS seeds, 3 moves)",
            mean_err[0], mean_err[1], mean_err[2], cov_err
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Analytic policy gradient against central differences.

/// Parameters with O(1) activations: weights U(±2/√fan_in), biases U(±0.5).
fn random_policy(arch: PolicyArch, seed: u64) -> PolicyParameters {
    let template = PolicyParameters::init(arch.clone(), 2.5, 0.0, 1.0, &mut RngStream::from_seed(0)).unwrap();
    let mut values = template.values().to_vec();
    let mut rng = RngStream::from_seed(seed);
    for g in template.groups() {
        let bound = if g.name == "log_variance" {
            1.0
        } else if g.shape.len() == 2 {
            2.0 / (g.shape[1] as f64).sqrt()
        } else {
            0.5
        };
        for v in &mut values[g.range()] {
            *v = bound * (2.0 * rng.uniform() - 1.0);
        }
    }
    PolicyParameters::from_values(arch, 2.5, 0.0, values).unwrap()
}

fn random_history(p: &PolicyParameters, steps: usize, state_dim: usize, seed: u64) -> Trajectory {
    let mut rng = RngStream::from_seed(seed);
    let mut traj = Trajectory::new((0..state_dim).map(|_| rng.standard_normal()).collect());
    for _ in 0..steps {
        let x: Vec<f64> = (0..state_dim).map(|_| rng.standard_normal()).collect();
        let s = vec![1.5 * rng.standard_normal()];
        traj.push(x, p.squash(&s), Some(s));
    }
    traj
}

/// Largest relative error over `coords`, with `max(|g|, |fd|, 1e-4)` as the scale.
fn fd_error(p: &PolicyParameters, traj: &Trajectory, coords: &[usize]) -> f64 {
    let h = 1e-5;
    let (_, grad) = p.trajectory_logpdf_grad(traj).unwrap();
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for &i in coords {
        let v = q.values()[i];
        q.values_mut()[i] = v + h;
        let up = q.trajectory_logpdf(traj).unwrap();
        q.values_mut()[i] = v - h;
        let down = q.trajectory_logpdf(traj).unwrap();
        q.values_mut()[i] = v;
        let fd = (up - down) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

fn gradient_exactness() -> Outcome {
    let mut worst_compact: f64 = 0.0;
    let mut worst_standard: f64 = 0.0;
    let mut checked = (0, 0);
    for seed in 0..5 {
        for steps in [1, 5] {
            let compact = random_policy(PolicyArch::compact(3, 1), 300 + seed);
            let traj = random_history(&compact, steps, 2, 400 + seed);
            let all: Vec<usize> = (0..compact.num_params()).collect();
            worst_compact = worst_compact.max(fd_error(&compact, &traj, &all));
            checked.0 += all.len();

            let standard = random_policy(PolicyArch::standard(3, 1), 500 + seed);
            let traj = random_history(&standard, steps, 2, 600 + seed);
            let mut rng = RngStream::from_seed(700 + seed);
            let mut coords = Vec::new();
            for g in standard.groups() {
                let r = g.range();
                coords.push(r.start);
                coords.push(r.end - 1);
                for _ in 0..6 {
                    coords.push(r.start + ((rng.uniform() * g.len() as f64) as usize).min(g.len() - 1));
                }
            }
            worst_standard = worst_standard.max(fd_error(&standard, &traj, &coords));
            checked.1 += coords.len();
        }
    }
    outcome(
        worst_compact <= 1e-4 && worst_standard <= 1e-4,
        format!(
            "max rel. error {worst_compact:.2e} over every coordinate of a small network ({} checks), \
             {worst_standard:.2e} over sampled coordinates of every group of the full network ({} checks); T in {{1,5}}, 5 seeds",
            checked.0, checked.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5. EIG sanity checks with known answers.

fn zero_information() -> Outcome {
    let env = toy::theta_free(10);
    let cfg = EigConfig::new(&env, 64, 32, InnerMode::Ibis);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for seed in 0..20 {
        let est = estimate_eig(&env, DesignPolicy::Random, &cfg, &RngStream::from_seed(800 + seed)).unwrap();
        ok &= est.value.abs() <= 3.0 * est.std_error;
        worst = worst.max(est.value.abs());
    }
    outcome(ok, format!("max |EIG| {worst:.2e} over 20 seeds"))
}

fn closed_form_mi() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (k, &(h, p, sd)) in [(1.5, 2.0, 0.7), (0.4, 1.0, 1.0), (3.0, 0.5, 0.2)].iter().enumerate() {
        let env = toy::scalar_linear(h, 0.3, p, sd);
        let cfg = EigConfig::new(&env, 20_000, 0, InnerMode::Exact);
        let est = estimate_eig(&env, DesignPolicy::Random, &cfg, &RngStream::from_seed(900 + k as u64)).unwrap();
        let mi = 0.5 * (1.0 + h * h * p / (sd * sd)).ln();
        ok &= (est.value - mi).abs() <= 3.0 * est.std_error;
        detail.push(format!("{:.4}±{:.4} vs {mi:.4}", est.value, est.std_error));
    }
    outcome(ok, detail.join(", "))
}

// ---------------------------------------------------------------------------
// 6. IBIS estimate converges to the closed-form one as M grows.

fn particle_consistency() -> Outcome {
    let env = make_pendulum_linear();
    let n = 128;
    let seeds = 20u64;
    let exact: Vec<f64> = (0..seeds)
        .map(|s| {
            let cfg = EigConfig::new(&env, n, 0, InnerMode::Exact);
            estimate_eig(&env, DesignPolicy::Random, &cfg, &RngStream::from_seed(1000 + s))
                .unwrap()
                .value
        })
        .collect();
    let (me, se) = mean_and_std_error(&exact);
    let mut diffs = Vec::new();
    let mut last_band = 0.0;
    for m in [8, 32, 128, 512] {
        let mut cfg = EigConfig::new(&env, n, m, InnerMode::Ibis);
        // Rejuvenate at every step with three moves.
        cfg.mh = MhConfig::gaussian(0.1, 3);
        cfg.ess_threshold = 1.0;
        let vals: Vec<f64> = (0..seeds)
            .map(|s| {
                estimate_eig(&env, DesignPolicy::Random, &cfg, &RngStream::from_seed(2000 + s))
                    .unwrap()
                    .value
            })
            .collect();
        let (mm, sm) = mean_and_std_error(&vals);
        diffs.push((mm - me).abs());
        last_band = 3.0 * (se * se + sm * sm).sqrt();
    }
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        monotone && diffs[3] <= last_band,
        format!(
            "|IBIS − exact| = {:.3}, {:.3}, {:.3}, {:.3} for M = 8, 32, 128, 512; 3 combined SE at M=512 {:.3} (exact {me:.3})",
            diffs[0], diffs[1], diffs[2], diffs[3], last_band
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. The conditional kernel leaves the selection law invariant.

fn csmc_invariance() -> Outcome {
    let env = make_pendulum_nonlinear().with_horizon(3);
    let cfg = SmcConfig::new(
        8,
        16,
        InnerMode::Ibis,
        PotentialConfig::new(0.5, 0.1),
        MhConfig::default_for(&env),
    );
    let stat = |r: &ReferenceTrajectory| r.trajectory.designs().map(|d| d[0]).sum::<f64>();
    let mut passes = 0;
    let mut ps = Vec::new();
    for g in 0..10u64 {
        let base = RngStream::from_seed(3000 + g);
        let mut r = initial_reference(&env, DesignPolicy::Random, &cfg, &base.derive(0)).unwrap();
        let mut chain = Vec::with_capacity(200);
        for k in 0..200 {
            r = csmc_kernel(&r, &env, DesignPolicy::Random, &cfg, &base.derive2(1, k)).unwrap();
            chain.push(stat(&r));
        }
        let fresh: Vec<f64> = (0..200)
            .map(|k| stat(&initial_reference(&env, DesignPolicy::Random, &cfg, &base.derive2(2, k)).unwrap()))
            .collect();
        let p = ks_p_value(ks_statistic(&chain, &fresh), 200, 200);
        passes += usize::from(p > 0.01);
        ps.push(format!("{p:.2}"));
    }
    outcome(
        passes >= 9,
        format!("{passes}/10 groups pass KS at α=0.01 (p = {})", ps.join(" ")),
    )
}

// ---------------------------------------------------------------------------
// 8. sPCE bound.

fn spce_checks(trained: Option<&Path>) -> Outcome {
    let env = make_pendulum_nonlinear();
    let l = 255;
    let bound = ((l + 1) as f64).ln();
    let est = spce_bound(&env, DesignPolicy::Random, l, 10_000, &RngStream::from_seed(4000)).unwrap();
    let hard = est.samples.len() == 10_000 && est.samples.iter().all(|g| *g <= bound);
    let max = est.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let Some(path) = trained else {
        return outcome(
            false,
            format!("hard bound holds: {hard} (max {max:.3} ≤ {bound:.3}); no trained policy"),
        );
    };
    let policy = PolicyParameters::load_json(path).unwrap().mean_policy();
    let (l, n_outer) = (1023, 512);
    let seed = RngStream::from_seed(4001);
    let random = spce_bound(&env, DesignPolicy::Random, l, n_outer, &seed).unwrap();
    let learned = spce_bound(&env, DesignPolicy::Network(&policy), l, n_outer, &seed).unwrap();
    let cap = ((l + 1) as f64).ln();
    let trained_hard = learned.samples.iter().chain(&random.samples).all(|g| *g <= cap);
    outcome(
        hard && trained_hard && learned.value > random.value,
        format!(
            "10⁴ samples ≤ log(L+1) = {bound:.3} (max {max:.3}); sPCE L=1023: trained {:.3}±{:.3} vs random {:.3}±{:.3}",
            learned.value, learned.std_error, random.value, random.std_error
        ),
    )
}

// ---------------------------------------------------------------------------
// 9 to 12. Training reproductions through the command-line tool.

fn iosmc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_iosmc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "iosmc {} failed with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn last_epoch_eig(dir: &Path) -> f64 {
    csv_rows(&dir.join("metrics.csv")).last().unwrap()[1].parse().unwrap()
}

fn ig_at_horizon(dir: &Path, checkpoint: &str) -> f64 {
    let d = dir.to_str().unwrap();
    iosmc(&[
        "--seed",
        "7",
        "--output-dir",
        d,
        "eval",
        "--env",
        "pendulum_linear",
        "--checkpoint",
        checkpoint,
        "--metric",
        "ig-trace",
        "--rollouts",
        "512",
    ])
    .unwrap();
    csv_rows(&dir.join("ig_trace.csv")).last().unwrap()[1].parse().unwrap()
}

/// Summary row value of an EIG report.
fn eig_summary(dir: &Path, env: &str, checkpoint: &str, extra: &[&str]) -> (f64, f64) {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "--seed",
        "11",
        "--output-dir",
        d,
        "eval",
        "--env",
        env,
        "--checkpoint",
        checkpoint,
        "--metric",
        "eig",
    ];
    args.extend(extra);
    iosmc(&args).unwrap();
    let row = csv_rows(&dir.join("eval_eig.csv")).pop().unwrap();
    (row[4].parse().unwrap(), row[5].parse().unwrap())
}

struct LinearRun {
    dir: PathBuf,
    identical_metrics: bool,
}

fn linear_training(root: &Path) -> LinearRun {
    let a = root.join("linear_a");
    let b = root.join("linear_b");
    for d in [&a, &b] {
        iosmc(&[
            "--threads",
            "1",
            "--seed",
            "1",
            "--output-dir",
            d.to_str().unwrap(),
            "train",
            "--env",
            "pendulum_linear",
            "--mode",
            "exact",
        ])
        .unwrap();
    }
    let identical_metrics =
        std::fs::read(a.join("metrics.csv")).unwrap() == std::fs::read(b.join("metrics.csv")).unwrap();
    LinearRun {
        dir: a,
        identical_metrics,
    }
}

fn figure_reproduction(run: &LinearRun) -> Outcome {
    let rows = csv_rows(&run.dir.join("metrics.csv"));
    let eig = last_epoch_eig(&run.dir);
    let eval_dir = run.dir.join("eval");
    let ckpt = run.dir.join("policy.json");
    let trained = ig_at_horizon(&eval_dir, ckpt.to_str().unwrap());
    let random = ig_at_horizon(&eval_dir, "random");
    let first: f64 = rows[0][1].parse().unwrap();
    outcome(
        rows.len() == 15 && eig >= 9.5 && trained - random >= 1.5,
        format!(
            "{} epochs, mean-policy EIG {first:.3} → {eig:.3}; IG at t=50 trained {trained:.3} vs random {random:.3} (+{:.3})",
            rows.len(),
            trained - random
        ),
    )
}

fn nonlinear_reproduction(root: &Path) -> (Outcome, Option<PathBuf>) {
    let dir = root.join("nonlinear");
    let d = dir.to_str().unwrap();
    if let Err(e) = iosmc(&["--seed", "1", "--output-dir", d, "train", "--env", "pendulum_nonlinear"]) {
        return (outcome(false, e), None);
    }
    let ckpt = dir.join("policy.json");
    let (trained, sd_t) = eig_summary(
        &dir.join("eval_trained"),
        "pendulum_nonlinear",
        ckpt.to_str().unwrap(),
        &["--reps", "25"],
    );
    let (random, sd_r) = eig_summary(
        &dir.join("eval_random"),
        "pendulum_nonlinear",
        "random",
        &["--reps", "25"],
    );
    (
        outcome(
            trained - random >= 0.5,
            format!(
                "EIG over 25 reps: trained {trained:.3}±{sd_t:.3} vs random {random:.3}±{sd_r:.3} (+{:.3})",
                trained - random
            ),
        ),
        Some(ckpt),
    )
}

fn cartpole_reproduction(root: &Path, reduced: bool) -> Outcome {
    let dir = root.join("cartpole");
    let d = dir.to_str().unwrap();
    let mut args = vec!["--seed", "1", "--output-dir", d, "train", "--env", "cartpole"];
    let sizes = [
        "--n", "128", "--m", "64", "--eval-n", "128", "--eval-m", "64", "--epochs", "5",
    ];
    if reduced {
        args.extend(sizes);
    }
    if let Err(e) = iosmc(&args) {
        return outcome(false, e);
    }
    let extra: Vec<&str> = if reduced {
        vec!["--reps", "25", "--eval-n", "128", "--eval-m", "64"]
    } else {
        vec!["--reps", "25"]
    };
    let ckpt = dir.join("policy.json");
    let (trained, sd_t) = eig_summary(&dir.join("eval_trained"), "cartpole", ckpt.to_str().unwrap(), &extra);
    let (random, sd_r) = eig_summary(&dir.join("eval_random"), "cartpole", "random", &extra);
    let margin = if reduced { 1.0 } else { 2.0 };
    outcome(
        trained - random >= margin,
        format!(
            "{} run: trained {trained:.3}±{sd_t:.3} vs random {random:.3}±{sd_r:.3} (+{:.3}, need +{margin})",
            if reduced { "reduced" } else { "full" },
            trained - random
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run on a plain invocation.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // Comma-separated criterion ids restrict the run; 8 needs 10 and 12 needs 9.
    let only: Option<Vec<String>> = std::env::var("IOSMC_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let selected = |id: &str| only.as_ref().is_none_or(|ids| ids.iter().any(|i| i == id));
    let workdir = tempfile::tempdir().unwrap();
    let root = workdir.path();
    let mut lines = Vec::new();
    if selected("1") {
        lines.push(run("1", "conjugacy oracle", conjugacy_oracle));
    }
    if selected("2") {
        lines.push(run("2", "IBIS correctness", ibis_correctness));
    }
    if selected("3") {
        lines.push(run("3", "gradient exactness", gradient_exactness));
    }
    if selected("4") {
        lines.push(run("4", "zero-information sanity", zero_information));
    }
    if selected("5") {
        lines.push(run("5", "closed-form mutual information", closed_form_mi));
    }
    if selected("6") {
        lines.push(run("6", "particle-count consistency", particle_consistency));
    }
    if selected("7") {
        lines.push(run("7", "CSMC invariance", csmc_invariance));
    }

    let mut linear = None;
    if selected("9") {
        lines.push(run("9", "linear pendulum training", || {
            let r = linear_training(root);
            let o = figure_reproduction(&r);
            linear = Some(r);
            o
        }));
    }
    let mut trained = None;
    if selected("10") {
        lines.push(run("10", "nonlinear pendulum training", || {
            let (o, ckpt) = nonlinear_reproduction(root);
            trained = ckpt;
            o
        }));
    }
    if selected("8") {
        lines.push(run("8", "sPCE bound", || spce_checks(trained.as_deref())));
    }
    if selected("11") {
        match std::env::var("IOSMC_ACCEPTANCE_EXTENDED").as_deref() {
            Ok("full") => lines.push(run("11", "cart-pole training", || cartpole_reproduction(root, false))),
            Ok("reduced") => lines.push(run("11", "cart-pole training", || cartpole_reproduction(root, true))),
            _ => println!(
                "criterion 11 cart-pole training: SKIP | extended check; set IOSMC_ACCEPTANCE_EXTENDED=full or =reduced"
            ),
        }
    }
    if selected("12") {
        lines.push(run("12", "determinism", || match &linear {
            Some(r) => outcome(
                r.identical_metrics,
                "two --threads 1 training runs with seed 1 wrote byte-identical metrics.csv",
            ),
            None => outcome(false, "linear training did not run"),
        }));
    }

    let failed: Vec<&String> = lines.iter().filter(|(_, ok)| !ok).map(|(l, _)| l).collect();
    println!("\n{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        // `exit` skips destructors.
        drop(workdir);
        std::process::exit(1);
    }
}
