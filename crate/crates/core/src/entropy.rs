//! Sampled-token NLL entropy proxy, over whole responses and over the
//! thinking / answer segments of a response.

use crate::error::{Error, Result};
use crate::model::{Group, Rollout};

/// Per-segment entropies of one rollout, in nats per token.
///
/// A segment with no tokens is reported as `None`, never as `0.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentEntropies {
    pub thinking: Option<f64>,
    pub answer: Option<f64>,
    pub total: f64,
    pub thinking_len: usize,
    pub answer_len: usize,
}

/// Mean negative log-probability per token, clamped at zero.
pub fn sequence_entropy(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let nll: f64 = token_logprobs.iter().map(|lp| -lp).sum();
    Ok((nll / token_logprobs.len() as f64).max(0.0))
}

fn mean_nll<'a>(values: impl Iterator<Item = &'a f64>) -> (Option<f64>, usize) {
    let (sum, count) = values.fold((0.0, 0usize), |(s, n), lp| (s - lp, n + 1));
    if count == 0 {
        (None, 0)
    } else {
        (Some((sum / count as f64).max(0.0)), count)
    }
}

pub fn segment_entropy(r: &Rollout) -> Result<SegmentEntropies> {
    let total = sequence_entropy(&r.token_logprobs)?;
    let Some(span) = r.think_span.filter(|s| !s.is_empty()) else {
        return Ok(SegmentEntropies {
            thinking: None,
            answer: Some(total),
            total,
            thinking_len: 0,
            answer_len: r.token_logprobs.len(),
        });
    };
    let lps = &r.token_logprobs;
    let end = span.end.min(lps.len());
    let start = span.start.min(end);
    let (thinking, thinking_len) = mean_nll(lps[start..end].iter());
    let (answer, answer_len) = mean_nll(lps[..start].iter().chain(lps[end..].iter()));
    Ok(SegmentEntropies {
        thinking,
        answer,
        total,
        thinking_len,
        answer_len,
    })
}

/// Entropy of every rollout in the group, in rollout order.
pub fn group_entropies(g: &Group) -> Result<Vec<f64>> {
    g.rollouts()
        .iter()
        .map(|r| sequence_entropy(&r.token_logprobs))
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn group_mean_entropy(g: &Group) -> Result<f64> {
    Ok(mean(&group_entropies(g)?))
}
