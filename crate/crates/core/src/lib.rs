//! Entropy-guided advantage calibration for group-based policy optimization
//! with binary verifiable rewards.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: rollouts, groups, configuration, calibrated outputs
//! - [`entropy`]: sampled-token NLL entropy proxy and thinking/answer split
//! - [`calibration`]: inverse-entropy weights, asymmetric clamp, NSR advantages
//! - [`objective`]: clipped-ratio objective, analytic logit gradients, finite
//!   difference checker
//! - [`simulator`]: tabular softmax policy on synthetic verifiable tasks
//! - [`diagnostics`]: entropy gap, ROC-AUC, rank correlation, boxed answers
//! - [`cli`]: line-delimited JSON formats and the command implementations

pub mod calibration;
pub mod cli;
pub mod diagnostics;
pub mod entropy;
pub mod error;
pub mod model;
pub mod objective;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{
    CalibratedGroup, CalibrationConfig, Group, GroupKind, RatioMode, Renorm, Reward, Rollout, ThinkSpan, Variant,
};

/// Build identifier printed by `--version` and exposed to bindings.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
