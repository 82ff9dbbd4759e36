//! Entropy-guided weighting and advantage construction for one group.
//!
//! The pipeline is: per-rollout entropy, group-relative inverse-entropy
//! weight, optional renormalization before the clamp (C6), the clamp, optional
//! renormalization after it (C5), the outcome-dependent base advantage, and
//! finally the calibrated advantage `w_i * A_i`.

use crate::entropy::{group_entropies, mean};
use crate::error::{Error, Result};
use crate::model::{classify_rewards, CalibratedGroup, CalibrationConfig, Group, GroupKind, Renorm, Reward, Variant};

/// Group-normalized advantages with population std.
///
/// Uniform-reward groups have zero std and collapse to all zeros.
pub fn grpo_advantage(rewards: &[Reward]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if classify_rewards(rewards) != GroupKind::Mixed {
        return Ok(vec![0.0; rewards.len()]);
    }
    let values: Vec<f64> = rewards.iter().map(|r| r.value()).collect();
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    let std = var.sqrt();
    Ok(values.iter().map(|v| (v - m) / std).collect())
}

/// `mean(H) / (H_i + eps_h)` for every rollout.
pub fn raw_weight(entropies: &[f64], eps_h: f64) -> Vec<f64> {
    let h_bar = mean(entropies);
    entropies.iter().map(|h| h_bar / (h + eps_h)).collect()
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Outcome-aware clamp, with the one-sided and symmetric ablation forms.
///
/// GRPO has no weights; it returns all ones.
pub fn asymmetric_clamp(
    raw: &[f64],
    rewards: &[Reward],
    lambda_min: f64,
    lambda_max: f64,
    variant: Variant,
) -> Result<Vec<f64>> {
    if raw.len() != rewards.len() {
        return Err(Error::LengthMismatch {
            what: "weights vs rewards",
            left: raw.len(),
            right: rewards.len(),
        });
    }
    let out = raw
        .iter()
        .zip(rewards)
        .map(|(&w, &r)| {
            let c = clip(w, lambda_min, lambda_max);
            match (variant, r) {
                (Variant::Grpo, _) => 1.0,
                (Variant::C1, _) => c,
                (Variant::C2, Reward::Incorrect) => c.min(1.0),
                (Variant::C2, Reward::Correct) => c,
                (Variant::C3, Reward::Correct) => c.max(1.0),
                (Variant::C3, Reward::Incorrect) => c,
                (_, Reward::Correct) => c.max(1.0),
                (_, Reward::Incorrect) => c.min(1.0),
            }
        })
        .collect();
    Ok(out)
}

/// Divides by the mean so the weights average to one.
///
/// A vector whose mean is already one up to summation round-off is returned
/// unchanged, which makes the operation exactly idempotent.
pub fn renormalize(weights: &[f64]) -> Result<Vec<f64>> {
    let m = mean(weights);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::DegenerateWeights(m));
    }
    if (m - 1.0).abs() <= weights.len() as f64 * f64::EPSILON {
        return Ok(weights.to_vec());
    }
    Ok(weights.iter().map(|w| w / m).collect())
}

/// Base advantage by group kind: skip, GRPO, or constant -1 (NSR).
pub fn base_advantage(g: &Group, variant: Variant) -> Vec<f64> {
    match g.kind() {
        GroupKind::AllCorrect => vec![0.0; g.len()],
        GroupKind::AllIncorrect if variant == Variant::Grpo => vec![0.0; g.len()],
        GroupKind::AllIncorrect => vec![-1.0; g.len()],
        // Group::new guarantees N >= 2, so this cannot fail.
        GroupKind::Mixed => grpo_advantage(&g.rewards()).expect("valid group"),
    }
}

pub fn calibrate_group(g: &Group, cfg: &CalibrationConfig) -> Result<CalibratedGroup> {
    cfg.validate()?;
    let rewards = g.rewards();
    let entropy = group_entropies(g)?;
    let mean_entropy = mean(&entropy);
    let raw = raw_weight(&entropy, cfg.eps_h);

    let weight = if cfg.variant == Variant::Grpo {
        vec![1.0; g.len()]
    } else {
        let pre = match cfg.renorm {
            Renorm::BeforeClamp => renormalize(&raw)?,
            _ => raw.clone(),
        };
        let clamped = asymmetric_clamp(&pre, &rewards, cfg.lambda_min, cfg.lambda_max, cfg.variant)?;
        let w = match cfg.renorm {
            Renorm::AfterClamp => renormalize(&clamped)?,
            _ => clamped,
        };
        if cfg.variant == Variant::C4 && g.kind() == GroupKind::AllIncorrect {
            vec![1.0; g.len()]
        } else {
            w
        }
    };

    let base_adv = base_advantage(g, cfg.variant);
    let calibrated_adv = weight.iter().zip(&base_adv).map(|(w, a)| w * a).collect();
    Ok(CalibratedGroup {
        prompt_id: g.prompt_id().to_string(),
        kind: g.kind(),
        entropy,
        raw_weight: raw,
        weight,
        base_adv,
        calibrated_adv,
        mean_entropy,
    })
}
