use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the calibration kernel, the objective, the simulator and
/// the diagnostics. Variant names are stable; bindings and the CLI report them
/// verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("EmptyResponse: response has no tokens")]
    EmptyResponse,

    #[error("PositiveLogProb: token {index} has log-probability {value} > 1e-6")]
    PositiveLogProb { index: usize, value: f64 },

    #[error("BadReward: reward {0} is not in {{-1, +1}}")]
    BadReward(i64),

    #[error("BadSpan: think span [{start}, {end}) is invalid for {len} tokens")]
    BadSpan { start: usize, end: usize, len: usize },

    #[error("GroupTooSmall: a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),

    #[error("PromptMismatch: rollout for prompt {found:?} in group {expected:?}")]
    PromptMismatch { expected: String, found: String },

    #[error("LengthMismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("DegenerateWeights: weight mean {0} is not positive")]
    DegenerateWeights(f64),

    #[error("NonFinite: {0}")]
    NonFinite(String),

    #[error("InvalidTrajectory: {0}")]
    InvalidTrajectory(String),

    #[error("MissingClass: {0}")]
    MissingClass(&'static str),

    #[error("NoSpans: no record carries a thinking segment")]
    NoSpans,

    #[error("DegenerateInput: {0}")]
    DegenerateInput(&'static str),

    #[error("training aborted at step {step}: {source}")]
    TrainingAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable name of the variant, e.g. `"BadReward"`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyResponse => "EmptyResponse",
            Error::PositiveLogProb { .. } => "PositiveLogProb",
            Error::BadReward(_) => "BadReward",
            Error::BadSpan { .. } => "BadSpan",
            Error::GroupTooSmall(_) => "GroupTooSmall",
            Error::PromptMismatch { .. } => "PromptMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DegenerateWeights(_) => "DegenerateWeights",
            Error::NonFinite(_) => "NonFinite",
            Error::InvalidTrajectory(_) => "InvalidTrajectory",
            Error::MissingClass(_) => "MissingClass",
            Error::NoSpans => "NoSpans",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::TrainingAborted { .. } => "TrainingAborted",
        }
    }
}
