//! Conditional Inside-Out SMC²: a Markov kernel on reference histories that
//! leaves the tempered smoothing target invariant.

use crate::error::Result;
use crate::models::Environment;
use crate::policy::DesignPolicy;
use crate::posterior::MoveStats;
use crate::smc::{run_filter, ReferenceTrajectory, SmcConfig};
use crate::stats::{categorical, RngStream};

const SELECT_STREAM: u64 = u64::MAX;

/// Draws a history from an unconditional filter run, selected by the final
/// outer weights. Used to start score-climbing chains.
pub fn initial_reference(
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<ReferenceTrajectory> {
    let mut cfg = *cfg;
    cfg.resampling = true;
    let run = run_filter(env, policy, &cfg, None, rng)?;
    let w: Vec<f64> = run.log_weights.iter().map(|v| v.exp()).collect();
    let j = categorical(&w, &mut rng.derive(SELECT_STREAM));
    Ok(run.reference(j))
}

/// One conditional SMC sweep with `reference` pinned in slot 0 (its states,
/// designs and θ-snapshots are replayed, never resampled away), followed by
/// selecting a new reference by the final weights.
pub fn csmc_kernel(
    reference: &ReferenceTrajectory,
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<ReferenceTrajectory> {
    Ok(csmc_kernel_indexed(reference, env, policy, cfg, rng)?.0)
}

/// Like [`csmc_kernel`] but also reports the selected slot (0 = reference).
pub fn csmc_kernel_indexed(
    reference: &ReferenceTrajectory,
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<(ReferenceTrajectory, usize)> {
    let out = csmc_sweep(reference, env, policy, cfg, rng)?;
    Ok((out.reference, out.selected))
}

/// Result of one kernel application.
#[derive(Clone, Debug)]
pub struct KernelStep {
    pub reference: ReferenceTrajectory,
    /// Selected slot; 0 keeps the old reference.
    pub selected: usize,
    pub move_stats: MoveStats,
}

/// Kernel application with full diagnostics.
pub fn csmc_sweep(
    reference: &ReferenceTrajectory,
    env: &Environment,
    policy: DesignPolicy<'_>,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<KernelStep> {
    let mut cfg = *cfg;
    cfg.resampling = true;
    let run = run_filter(env, policy, &cfg, Some(reference), rng)?;
    let w: Vec<f64> = run.log_weights.iter().map(|v| v.exp()).collect();
    let j = categorical(&w, &mut rng.derive(SELECT_STREAM));
    Ok(KernelStep {
        reference: run.reference(j),
        selected: j,
        move_stats: run.move_stats,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS p-value (Kolmogorov distribution with the
/// usual small-sample correction).
pub fn ks_p_value(d: f64, na: usize, nb: usize) -> f64 {
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
