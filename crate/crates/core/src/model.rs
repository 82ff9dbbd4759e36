//! Shared data model: rollouts, groups, calibration configuration and the
//! per-group calibration result.
//!
//! Everything here is an immutable value once constructed. Constructors
//! validate, so downstream math can assume the invariants hold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack tolerated on log-probabilities coming from external trainers.
pub const LOGPROB_SLACK: f64 = 1e-6;

/// Binary verifier outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reward {
    Correct,
    Incorrect,
}

impl Reward {
    pub fn from_int(value: i64) -> Result<Self> {
        match value {
            1 => Ok(Reward::Correct),
            -1 => Ok(Reward::Incorrect),
            other => Err(Error::BadReward(other)),
        }
    }

    pub fn as_int(self) -> i64 {
        match self {
            Reward::Correct => 1,
            Reward::Incorrect => -1,
        }
    }

    pub fn value(self) -> f64 {
        self.as_int() as f64
    }

    pub fn is_correct(self) -> bool {
        self == Reward::Correct
    }
}

/// Half-open token-index interval `[start, end)` marking the thinking segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct ThinkSpan {
    pub start: usize,
    pub end: usize,
}

impl ThinkSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

impl From<[usize; 2]> for ThinkSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<ThinkSpan> for [usize; 2] {
    fn from(span: ThinkSpan) -> Self {
        [span.start, span.end]
    }
}

/// One sampled response with its old-policy token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: String,
    pub token_logprobs: Vec<f64>,
    pub reward: Reward,
    pub text: Option<String>,
    pub think_span: Option<ThinkSpan>,
}

impl Rollout {
    /// Builds and validates a rollout without text or span.
    pub fn new(prompt_id: impl Into<String>, token_logprobs: Vec<f64>, reward: Reward) -> Result<Self> {
        validate_rollout(Rollout {
            prompt_id: prompt_id.into(),
            token_logprobs,
            reward,
            text: None,
            think_span: None,
        })
    }

    pub fn with_span(mut self, span: ThinkSpan) -> Result<Self> {
        self.think_span = Some(span);
        validate_rollout(self)
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }
}

/// Returns the rollout unchanged iff every rollout invariant holds.
pub fn validate_rollout(r: Rollout) -> Result<Rollout> {
    if r.token_logprobs.is_empty() {
        return Err(Error::EmptyResponse);
    }
    for (index, &value) in r.token_logprobs.iter().enumerate() {
        if value.is_nan() || value > LOGPROB_SLACK {
            return Err(Error::PositiveLogProb { index, value });
        }
        if value == f64::NEG_INFINITY {
            return Err(Error::NonFinite(format!("token {index} has log-probability -inf")));
        }
    }
    if let Some(span) = r.think_span {
        if span.start > span.end || span.end > r.token_logprobs.len() {
            return Err(Error::BadSpan {
                start: span.start,
                end: span.end,
                len: r.token_logprobs.len(),
            });
        }
    }
    Ok(r)
}

/// Outcome pattern of a group; selects the base-advantage branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Mixed,
    AllCorrect,
    AllIncorrect,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Mixed => "mixed",
            GroupKind::AllCorrect => "all_correct",
            GroupKind::AllIncorrect => "all_incorrect",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_group(rewards: &[Reward]) -> Result<GroupKind> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    Ok(classify_rewards(rewards))
}

/// Same as [`classify_group`] on raw integers, rejecting out-of-domain values.
pub fn classify_group_ints(rewards: &[i64]) -> Result<GroupKind> {
    let rewards = rewards
        .iter()
        .map(|&r| Reward::from_int(r))
        .collect::<Result<Vec<_>>>()?;
    classify_group(&rewards)
}

// No length check; callers that allow singletons (the clamp helpers) use this.
pub(crate) fn classify_rewards(rewards: &[Reward]) -> GroupKind {
    let correct = rewards.iter().filter(|r| r.is_correct()).count();
    if correct == rewards.len() {
        GroupKind::AllCorrect
    } else if correct == 0 {
        GroupKind::AllIncorrect
    } else {
        GroupKind::Mixed
    }
}

/// N >= 2 rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    prompt_id: String,
    rollouts: Vec<Rollout>,
    kind: GroupKind,
}

impl Group {
    pub fn new(prompt_id: impl Into<String>, rollouts: Vec<Rollout>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        let rollouts = rollouts.into_iter().map(validate_rollout).collect::<Result<Vec<_>>>()?;
        if let Some(r) = rollouts.iter().find(|r| r.prompt_id != prompt_id) {
            return Err(Error::PromptMismatch {
                expected: prompt_id,
                found: r.prompt_id.clone(),
            });
        }
        let rewards: Vec<Reward> = rollouts.iter().map(|r| r.reward).collect();
        let kind = classify_group(&rewards)?;
        Ok(Self {
            prompt_id,
            rollouts,
            kind,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn rewards(&self) -> Vec<Reward> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Algorithm variant: EGPO, plain GRPO, or one of the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Egpo,
    Grpo,
    /// Symmetric clip, no outcome-aware bound.
    C1,
    /// Clip, then `w <= 1` for incorrect rollouts only.
    C2,
    /// Clip, then `w >= 1` for correct rollouts only.
    C3,
    /// Asymmetric clamp, `w = 1` on entirely-incorrect groups.
    C4,
    /// Asymmetric clamp followed by renormalization.
    C5,
    /// Renormalization followed by asymmetric clamp.
    C6,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Egpo,
        Variant::Grpo,
        Variant::C1,
        Variant::C2,
        Variant::C3,
        Variant::C4,
        Variant::C5,
        Variant::C6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Egpo => "egpo",
            Variant::Grpo => "grpo",
            Variant::C1 => "c1",
            Variant::C2 => "c2",
            Variant::C3 => "c3",
            Variant::C4 => "c4",
            Variant::C5 => "c5",
            Variant::C6 => "c6",
        }
    }

    /// Renormalization placement implied by the variant.
    pub fn renorm(self) -> Renorm {
        match self {
            Variant::C5 => Renorm::AfterClamp,
            Variant::C6 => Renorm::BeforeClamp,
            _ => Renorm::None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renorm {
    None,
    AfterClamp,
    BeforeClamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatioMode {
    #[serde(rename = "sequence")]
    SequenceLevel,
    #[serde(rename = "token")]
    TokenLevel,
}

impl RatioMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RatioMode::SequenceLevel => "sequence",
            RatioMode::TokenLevel => "token",
        }
    }
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequence" | "sequence_level" | "seq" => Ok(RatioMode::SequenceLevel),
            "token" | "token_level" | "tok" => Ok(RatioMode::TokenLevel),
            _ => Err(Error::InvalidConfig(format!("unknown ratio mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub clip_eps: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eps_h: f64,
    pub renorm: Renorm,
    pub variant: Variant,
    pub ratio_mode: RatioMode,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            lambda_min: 0.8,
            lambda_max: 2.0,
            eps_h: 1e-6,
            renorm: Renorm::None,
            variant: Variant::Egpo,
            ratio_mode: RatioMode::SequenceLevel,
        }
    }
}

impl CalibrationConfig {
    /// Default bounds with the renormalization placement the variant requires.
    pub fn for_variant(variant: Variant) -> Self {
        Self::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.renorm = variant.renorm();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if self.variant == Variant::Grpo {
            return Ok(());
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return bad(format!("lambda_min must lie in (0, 1], got {}", self.lambda_min));
        }
        if !(self.lambda_max >= 1.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be finite and >= 1, got {}", self.lambda_max));
        }
        if !(self.eps_h > 0.0 && self.eps_h.is_finite()) {
            return bad(format!("eps_h must be positive, got {}", self.eps_h));
        }
        if self.renorm != self.variant.renorm() {
            return bad(format!(
                "variant {} requires renorm {:?}, got {:?}",
                self.variant,
                self.variant.renorm(),
                self.renorm
            ));
        }
        Ok(())
    }
}

/// Per-rollout calibration outputs for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedGroup {
    pub prompt_id: String,
    pub kind: GroupKind,
    pub entropy: Vec<f64>,
    pub raw_weight: Vec<f64>,
    pub weight: Vec<f64>,
    pub base_adv: Vec<f64>,
    pub calibrated_adv: Vec<f64>,
    pub mean_entropy: f64,
}

impl CalibratedGroup {
    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }
}
