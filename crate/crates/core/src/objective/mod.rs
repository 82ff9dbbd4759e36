//! Weighted clipped-ratio objective and its analytic logit gradient.
//!
//! For a rollout with calibrated advantage `A` and ratio `rho` the term is
//! `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`. Its derivative in `rho`
//! is `A` when the unclipped branch is the active minimum and zero otherwise;
//! the chain rule through the softmax gives `rho * (1[v = y_t] - pi_v)` per
//! logit. The objective is maximized.

mod gradcheck;
mod policy;

pub use gradcheck::{
    finite_diff_check, numeric_gradient, plateau_instance, random_instance, GradCheckInstance, GradCheckReport,
    DEFAULT_STEP, GRAD_FLOOR,
};
pub use policy::{log_sum_exp, sample_categorical, softmax, SoftmaxPolicy};

use crate::error::{Error, Result};
use crate::model::{GroupKind, RatioMode};

/// Largest exponent accepted before a ratio is declared non-finite.
pub const MAX_LOG_RATIO: f64 = 700.0;

/// One sampled token sequence with its old-policy log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub context: usize,
    pub tokens: Vec<usize>,
    pub old_logprobs: Vec<f64>,
}

/// Trajectories of one group together with their calibrated advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub kind: GroupKind,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ratio {
    Sequence(f64),
    Token(Vec<f64>),
}

fn checked_exp(x: f64) -> Result<f64> {
    if !x.is_finite() || x.abs() > MAX_LOG_RATIO {
        return Err(Error::NonFinite(format!("log importance ratio {x}")));
    }
    Ok(x.exp())
}

fn check_lengths(new: &[f64], old: &[f64]) -> Result<()> {
    if new.len() != old.len() {
        return Err(Error::LengthMismatch {
            what: "new vs old log-probabilities",
            left: new.len(),
            right: old.len(),
        });
    }
    if new.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(())
}

/// `exp(sum(new) - sum(old))`.
pub fn sequence_ratio(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<f64> {
    check_lengths(new_logprobs, old_logprobs)?;
    let log_ratio: f64 = new_logprobs.iter().zip(old_logprobs).map(|(n, o)| n - o).sum();
    checked_exp(log_ratio)
}

/// Elementwise `exp(new_t - old_t)`.
pub fn token_ratios(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<Vec<f64>> {
    check_lengths(new_logprobs, old_logprobs)?;
    new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(n, o)| checked_exp(n - o))
        .collect()
}

pub fn importance_ratio(new_logprobs: &[f64], old_logprobs: &[f64], mode: RatioMode) -> Result<Ratio> {
    match mode {
        RatioMode::SequenceLevel => sequence_ratio(new_logprobs, old_logprobs).map(Ratio::Sequence),
        RatioMode::TokenLevel => token_ratios(new_logprobs, old_logprobs).map(Ratio::Token),
    }
}

pub fn clip(rho: f64, clip_eps: f64) -> f64 {
    rho.max(1.0 - clip_eps).min(1.0 + clip_eps)
}

/// `min(rho * adv, clip(rho) * adv)`.
pub fn clipped_term(rho: f64, adv: f64, clip_eps: f64) -> f64 {
    (rho * adv).min(clip(rho, clip_eps) * adv)
}

/// True iff the clip branch is strictly the active minimum, so the term is
/// constant in `rho`.
pub fn clip_active(rho: f64, adv: f64, clip_eps: f64) -> bool {
    (adv > 0.0 && rho > 1.0 + clip_eps) || (adv < 0.0 && rho < 1.0 - clip_eps)
}

/// Adds `coef * (1[v = token] - pi_v)` to the slot's gradient row.
fn accumulate_softmax_grad(grad: &mut [f64], probs: &[f64], token: usize, coef: f64) {
    for (g, p) in grad.iter_mut().zip(probs) {
        *g -= coef * p;
    }
    grad[token] += coef;
}

/// Gradient of a negative-advantage term `-w * rho` with respect to every
/// logit, in the unclipped region: `-w * rho * (1[v = y_t] - pi_v)` at each
/// visited slot and zero elsewhere.
pub fn nsr_logit_gradient(policy: &SoftmaxPolicy, trajectory: &Trajectory, weight: f64, rho: f64) -> Vec<f64> {
    let mut grad = vec![0.0; policy.logits().len()];
    for (t, &tok) in trajectory.tokens.iter().enumerate() {
        let probs = policy.probs(trajectory.context, t);
        let o = policy.slot_offset(trajectory.context, t);
        accumulate_softmax_grad(&mut grad[o..o + probs.len()], &probs, tok, -weight * rho);
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTerm {
    pub group: usize,
    pub index: usize,
    pub term: f64,
    /// Sequence-level ratio, reported in both ratio modes.
    pub ratio: f64,
    /// Sequence mode: the clip branch is active. Token mode: it is active on
    /// at least one token.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub terms: Vec<RolloutTerm>,
    /// Mean term over rollouts of non-skipped groups (0 if there are none).
    pub loss: f64,
    /// Gradient of `loss` with respect to every logit.
    pub gradient: Vec<f64>,
    pub contributing: usize,
}

impl ObjectiveReport {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub(crate) fn validate_group(policy: &SoftmaxPolicy, g: &ScoredGroup) -> Result<()> {
    if g.advantages.len() != g.trajectories.len() {
        return Err(Error::LengthMismatch {
            what: "advantages vs trajectories",
            left: g.advantages.len(),
            right: g.trajectories.len(),
        });
    }
    for tr in &g.trajectories {
        if tr.context >= policy.num_contexts() {
            return Err(Error::InvalidTrajectory(format!("context {} out of range", tr.context)));
        }
        if tr.tokens.is_empty() || tr.tokens.len() > policy.horizon() {
            return Err(Error::InvalidTrajectory(format!(
                "length {} outside 1..={}",
                tr.tokens.len(),
                policy.horizon()
            )));
        }
        if tr.tokens.len() != tr.old_logprobs.len() {
            return Err(Error::LengthMismatch {
                what: "tokens vs old log-probabilities",
                left: tr.tokens.len(),
                right: tr.old_logprobs.len(),
            });
        }
        if let Some(&tok) = tr.tokens.iter().find(|&&tok| tok >= policy.vocab_size()) {
            return Err(Error::InvalidTrajectory(format!("token {tok} out of vocabulary")));
        }
    }
    Ok(())
}

/// Mean clipped objective over non-skipped groups and its analytic gradient.
pub fn group_loss_and_grad(
    policy: &SoftmaxPolicy,
    groups: &[ScoredGroup],
    clip_eps: f64,
    mode: RatioMode,
) -> Result<ObjectiveReport> {
    for g in groups {
        validate_group(policy, g)?;
    }
    let contributing: usize = groups
        .iter()
        .filter(|g| g.kind != GroupKind::AllCorrect)
        .map(|g| g.trajectories.len())
        .sum();
    let mut gradient = vec![0.0; policy.logits().len()];
    let mut terms = Vec::with_capacity(contributing);
    if contributing == 0 {
        return Ok(ObjectiveReport {
            terms,
            loss: 0.0,
            gradient,
            contributing,
        });
    }
    let scale = 1.0 / contributing as f64;
    let mut total = 0.0;

    for (gi, g) in groups.iter().enumerate() {
        if g.kind == GroupKind::AllCorrect {
            continue;
        }
        for (i, (tr, &adv)) in g.trajectories.iter().zip(&g.advantages).enumerate() {
            let new_lp = policy.trajectory_logprobs(tr.context, &tr.tokens);
            let seq_rho = sequence_ratio(&new_lp, &tr.old_logprobs)?;
            let (term, clipped) = match mode {
                RatioMode::SequenceLevel => {
                    let clipped = clip_active(seq_rho, adv, clip_eps);
                    if !clipped && adv != 0.0 {
                        for (t, &tok) in tr.tokens.iter().enumerate() {
                            let probs = policy.probs(tr.context, t);
                            let o = policy.slot_offset(tr.context, t);
                            accumulate_softmax_grad(
                                &mut gradient[o..o + probs.len()],
                                &probs,
                                tok,
                                scale * adv * seq_rho,
                            );
                        }
                    }
                    (clipped_term(seq_rho, adv, clip_eps), clipped)
                }
                RatioMode::TokenLevel => {
                    let rhos = token_ratios(&new_lp, &tr.old_logprobs)?;
                    let per_token = 1.0 / rhos.len() as f64;
                    let mut term = 0.0;
                    let mut any_clipped = false;
                    for (t, (&tok, &rho)) in tr.tokens.iter().zip(&rhos).enumerate() {
                        term += clipped_term(rho, adv, clip_eps);
                        let clipped = clip_active(rho, adv, clip_eps);
                        any_clipped |= clipped;
                        if !clipped && adv != 0.0 {
                            let probs = policy.probs(tr.context, t);
                            let o = policy.slot_offset(tr.context, t);
                            accumulate_softmax_grad(
                                &mut gradient[o..o + probs.len()],
                                &probs,
                                tok,
                                scale * per_token * adv * rho,
                            );
                        }
                    }
                    (term * per_token, any_clipped)
                }
            };
            total += term;
            terms.push(RolloutTerm {
                group: gi,
                index: i,
                term,
                ratio: seq_rho,
                clipped,
            });
        }
    }

    Ok(ObjectiveReport {
        terms,
        loss: total * scale,
        gradient,
        contributing,
    })
}

/// Loss only; used by the finite-difference checker.
pub fn group_loss(policy: &SoftmaxPolicy, groups: &[ScoredGroup], clip_eps: f64, mode: RatioMode) -> Result<f64> {
    group_loss_and_grad(policy, groups, clip_eps, mode).map(|r| r.loss)
}
