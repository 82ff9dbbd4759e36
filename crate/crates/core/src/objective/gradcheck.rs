//! Central finite-difference verification of the analytic objective gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{group_loss, group_loss_and_grad, sequence_ratio, token_ratios, ScoredGroup, SoftmaxPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::model::{GroupKind, RatioMode};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub seed: u64,
    pub policy: SoftmaxPolicy,
    pub groups: Vec<ScoredGroup>,
    pub clip_eps: f64,
    pub mode: RatioMode,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Logit indices skipped because a rollout sits on a clip boundary.
    pub excluded: Vec<usize>,
    pub passed: bool,
}

pub fn numeric_gradient(
    policy: &SoftmaxPolicy,
    groups: &[ScoredGroup],
    clip_eps: f64,
    mode: RatioMode,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = policy.clone();
    let mut out = Vec::with_capacity(policy.logits().len());
    for i in 0..policy.logits().len() {
        let z = policy.logits()[i];
        probe.logits_mut()[i] = z + step;
        let up = group_loss(&probe, groups, clip_eps, mode)?;
        probe.logits_mut()[i] = z - step;
        let down = group_loss(&probe, groups, clip_eps, mode)?;
        probe.logits_mut()[i] = z;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

fn near_boundary(rho: f64, clip_eps: f64, margin: f64) -> bool {
    (rho - (1.0 - clip_eps)).abs() < margin || (rho - (1.0 + clip_eps)).abs() < margin
}

/// Logits whose finite difference would straddle a clip kink.
fn boundary_logits(
    policy: &SoftmaxPolicy,
    groups: &[ScoredGroup],
    clip_eps: f64,
    mode: RatioMode,
    margin: f64,
) -> Result<Vec<bool>> {
    let mut mask = vec![false; policy.logits().len()];
    let v = policy.vocab_size();
    for g in groups.iter().filter(|g| g.kind != GroupKind::AllCorrect) {
        for tr in &g.trajectories {
            let new_lp = policy.trajectory_logprobs(tr.context, &tr.tokens);
            let near: Vec<bool> = match mode {
                RatioMode::SequenceLevel => {
                    let rho = sequence_ratio(&new_lp, &tr.old_logprobs)?;
                    vec![near_boundary(rho, clip_eps, margin); tr.tokens.len()]
                }
                RatioMode::TokenLevel => token_ratios(&new_lp, &tr.old_logprobs)?
                    .into_iter()
                    .map(|rho| near_boundary(rho, clip_eps, margin))
                    .collect(),
            };
            for (t, flag) in near.into_iter().enumerate() {
                if flag {
                    let o = policy.slot_offset(tr.context, t);
                    mask[o..o + v].iter_mut().for_each(|m| *m = true);
                }
            }
        }
    }
    Ok(mask)
}

/// Compares the analytic gradient with central differences on every logit.
///
/// Relative error is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn finite_diff_check(
    policy: &SoftmaxPolicy,
    groups: &[ScoredGroup],
    clip_eps: f64,
    mode: RatioMode,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step} outside [1e-8, 1e-4]"
        )));
    }
    let analytic = group_loss_and_grad(policy, groups, clip_eps, mode)?.gradient;
    let numeric = numeric_gradient(policy, groups, clip_eps, mode, step)?;
    let mask = boundary_logits(policy, groups, clip_eps, mode, 10.0 * step)?;

    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut worst_index = None;
    let mut excluded = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if mask[i] {
            excluded.push(i);
            continue;
        }
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(GRAD_FLOOR);
        max_abs_error = max_abs_error.max(abs);
        if rel > max_rel_error || worst_index.is_none() {
            max_rel_error = max_rel_error.max(rel);
            worst_index = Some(i);
        }
    }
    let checked = analytic.len() - excluded.len();
    Ok(GradCheckReport {
        passed: max_rel_error < tol,
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
        worst_index,
        checked,
        excluded,
    })
}

fn random_policy(rng: &mut ChaCha8Rng, k: usize, l: usize, v: usize, scale: f64) -> SoftmaxPolicy {
    let normal = Normal::new(0.0, scale).expect("valid std");
    let logits = (0..k * l * v).map(|_| normal.sample(rng)).collect();
    SoftmaxPolicy::from_logits(k, l, v, logits).expect("valid shape")
}

/// Random off-policy instance: small policy, a perturbed old policy, and
/// groups with advantages of both signs. Even seeds use sequence-level
/// ratios, odd seeds token-level.
pub fn random_instance(seed: u64) -> GradCheckInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3);
    let l = rng.random_range(1..=3);
    let v = rng.random_range(2..=5);
    let policy = random_policy(&mut rng, k, l, v, 1.0);
    let mut old = policy.clone();
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for z in old.logits_mut() {
        *z += noise.sample(&mut rng);
    }

    let n_groups = rng.random_range(1..=3);
    let groups = (0..n_groups)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let kind = match rng.random_range(0..6) {
                0 => GroupKind::AllIncorrect,
                1 => GroupKind::AllCorrect,
                _ => GroupKind::Mixed,
            };
            let trajectories: Vec<Trajectory> = (0..n)
                .map(|_| {
                    let context = rng.random_range(0..k);
                    let len = rng.random_range(1..=l);
                    let mut tokens = old.sample(context, &mut rng);
                    tokens.truncate(len);
                    let old_logprobs = old.trajectory_logprobs(context, &tokens);
                    Trajectory {
                        context,
                        tokens,
                        old_logprobs,
                    }
                })
                .collect();
            let advantages = (0..n)
                .map(|_| match kind {
                    GroupKind::AllCorrect => 0.0,
                    GroupKind::AllIncorrect => -rng.random_range(0.8..=1.0),
                    GroupKind::Mixed => {
                        let mag = rng.random_range(0.2..2.0);
                        if rng.random_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    }
                })
                .collect();
            ScoredGroup {
                kind,
                trajectories,
                advantages,
            }
        })
        .collect();
    GradCheckInstance {
        seed,
        policy,
        groups,
        clip_eps: 0.2,
        mode: if seed.is_multiple_of(2) {
            RatioMode::SequenceLevel
        } else {
            RatioMode::TokenLevel
        },
    }
}

/// Negative-advantage rollouts whose ratio sits deep in the constant region
/// (`rho < 1 - eps - 0.1` for every ratio involved).
pub fn plateau_instance(seed: u64, mode: RatioMode) -> GradCheckInstance {
    let clip_eps = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3);
    let l = rng.random_range(1..=3);
    let v = rng.random_range(2..=5);
    let old = random_policy(&mut rng, k, l, v, 0.5);
    let mut policy = old.clone();
    // One trajectory per context so lowering its tokens cannot raise another's.
    let trajectories: Vec<Trajectory> = (0..k)
        .map(|context| {
            let tokens = old.sample(context, &mut rng);
            let old_logprobs = old.trajectory_logprobs(context, &tokens);
            for (t, &tok) in tokens.iter().enumerate() {
                policy.slot_mut(context, t)[tok] -= 4.0;
            }
            Trajectory {
                context,
                tokens,
                old_logprobs,
            }
        })
        .collect();
    for tr in &trajectories {
        let new_lp = policy.trajectory_logprobs(tr.context, &tr.tokens);
        let deep = 1.0 - clip_eps - 0.1;
        assert!(sequence_ratio(&new_lp, &tr.old_logprobs).unwrap() < deep);
        assert!(token_ratios(&new_lp, &tr.old_logprobs)
            .unwrap()
            .iter()
            .all(|&r| r < deep));
    }
    let advantages = trajectories.iter().map(|_| -rng.random_range(0.8..=1.0)).collect();
    GradCheckInstance {
        seed,
        policy,
        groups: vec![ScoredGroup {
            kind: GroupKind::AllIncorrect,
            trajectories,
            advantages,
        }],
        clip_eps,
        mode,
    }
}
