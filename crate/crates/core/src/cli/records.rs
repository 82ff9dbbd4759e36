//! Line-delimited JSON records exchanged by the commands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Reward, Rollout, ThinkSpan};

/// One rollout inside a group record. `reward` stays an integer so that an
/// out-of-domain value is reported as `BadReward` rather than a parse error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub reward: i64,
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_span: Option<ThinkSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One group per line: `{prompt_id, rollouts: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub prompt_id: String,
    pub rollouts: Vec<RolloutRecord>,
}

impl GroupRecord {
    pub fn from_group(g: &Group) -> Self {
        Self {
            prompt_id: g.prompt_id().to_string(),
            rollouts: g
                .rollouts()
                .iter()
                .map(|r| RolloutRecord {
                    reward: r.reward.as_int(),
                    token_logprobs: r.token_logprobs.clone(),
                    think_span: r.think_span,
                    text: r.text.clone(),
                })
                .collect(),
        }
    }

    /// Rewards are checked first so that a bad reward is reported ahead of
    /// any other problem in the same record.
    pub fn rewards(&self) -> Result<Vec<Reward>> {
        self.rollouts.iter().map(|r| Reward::from_int(r.reward)).collect()
    }

    pub fn into_group(self) -> Result<Group> {
        let rewards = self.rewards()?;
        let rollouts = self
            .rollouts
            .into_iter()
            .zip(rewards)
            .map(|(rec, reward)| {
                let mut r = Rollout::new(self.prompt_id.clone(), rec.token_logprobs, reward)?;
                if let Some(span) = rec.think_span {
                    r = r.with_span(span)?;
                }
                if let Some(text) = rec.text {
                    r = r.with_text(text);
                }
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Group::new(self.prompt_id, rollouts)
    }
}

/// One rollout-log line for the diagnostics command.
///
/// Entropy comes from `token_logprobs` when present, otherwise from the
/// precomputed `entropy` / `thinking_entropy` / `answer_entropy` fields.
/// Correctness comes from `text` + `gold` when both are present, otherwise
/// from `correct`, otherwise from `reward`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    #[serde(default)]
    pub prompt_id: Option<String>,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub entropy: Option<f64>,
    #[serde(default)]
    pub thinking_entropy: Option<f64>,
    #[serde(default)]
    pub answer_entropy: Option<f64>,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub reward: Option<i64>,
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub think_span: Option<ThinkSpan>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub gold: Option<String>,
    /// Character offsets `[start, end)` of every token within `text`.
    #[serde(default)]
    pub token_offsets: Option<Vec<[usize; 2]>>,
}

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Token span strictly inside the first `<think>...</think>` pair, from
/// per-token character offsets. `None` when the text has no complete pair.
pub fn think_span_from_offsets(text: &str, offsets: &[[usize; 2]]) -> Result<Option<ThinkSpan>> {
    let Some(open) = text.find(THINK_OPEN) else {
        return Ok(None);
    };
    let inner_start = open + THINK_OPEN.len();
    let Some(close_rel) = text[inner_start..].find(THINK_CLOSE) else {
        return Ok(None);
    };
    let to_chars = |byte: usize| text[..byte].chars().count();
    let (lo, hi) = (to_chars(inner_start), to_chars(inner_start + close_rel));
    let inside: Vec<usize> = offsets
        .iter()
        .enumerate()
        .filter(|(_, o)| o[0] >= lo && o[1] <= hi && o[0] < o[1])
        .map(|(i, _)| i)
        .collect();
    let Some((&first, &last)) = inside.first().zip(inside.last()) else {
        return Ok(Some(ThinkSpan::new(0, 0)));
    };
    if last - first + 1 != inside.len() {
        return Err(Error::InvalidTrajectory(
            "token offsets inside <think> are not contiguous".into(),
        ));
    }
    Ok(Some(ThinkSpan::new(first, last + 1)))
}
