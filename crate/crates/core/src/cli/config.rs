//! TOML training configuration. Precedence: built-in defaults, then the
//! config file, then command-line flags.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{CalibrationConfig, RatioMode, Variant};
use crate::simulator::{SyntheticTask, TrainConfig, ALL_HARD_GOLD_DEPTH, DEFAULT_GOLD_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mixed,
    AllHard,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: Option<TaskKind>,
    pub contexts: Option<usize>,
    pub vocab: Option<usize>,
    pub horizon: Option<usize>,
    pub gold_depth: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub variant: Option<String>,
    pub clip_eps: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub eps_h: Option<f64>,
    pub ratio_mode: Option<String>,
}

/// Every field optional; absent fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub group_size: Option<usize>,
    pub inner_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub snapshot_period: Option<usize>,
    pub trace: Option<bool>,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Field-wise overlay: values set in `other` win.
    pub fn overlay(mut self, other: FileConfig) -> Self {
        macro_rules! take {
            ($($path:ident).+) => {
                if other.$($path).+.is_some() {
                    self.$($path).+ = other.$($path).+;
                }
            };
        }
        take!(seed);
        take!(steps);
        take!(group_size);
        take!(inner_epochs);
        take!(learning_rate);
        take!(snapshot_period);
        take!(trace);
        take!(task.kind);
        take!(task.contexts);
        take!(task.vocab);
        take!(task.horizon);
        take!(task.gold_depth);
        take!(calibration.variant);
        take!(calibration.clip_eps);
        take!(calibration.lambda_min);
        take!(calibration.lambda_max);
        take!(calibration.eps_h);
        take!(calibration.ratio_mode);
        self
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let seed = self.seed.unwrap_or(0);
        let kind = self.task.kind.unwrap_or(TaskKind::Mixed);
        let contexts = self.task.contexts.unwrap_or(32);
        let vocab = self.task.vocab.unwrap_or(8);
        let task = match kind {
            TaskKind::Mixed => {
                let mut t = SyntheticTask::mixed(contexts, vocab, self.task.horizon.unwrap_or(4), seed)?;
                t.gold_depth = self.task.gold_depth.unwrap_or(DEFAULT_GOLD_DEPTH);
                t
            }
            TaskKind::AllHard => SyntheticTask::all_hard(
                contexts,
                vocab,
                self.task.horizon.unwrap_or(2),
                self.task.gold_depth.unwrap_or(ALL_HARD_GOLD_DEPTH),
                seed,
            )?,
        };
        // re-run validation for the overridden depth
        let task = SyntheticTask::new(
            task.vocab_size,
            task.horizon,
            task.gold_token,
            task.hardness,
            task.gold_depth,
        )?;

        let c = &self.calibration;
        let variant: Variant = c.variant.as_deref().unwrap_or("egpo").parse()?;
        let defaults = CalibrationConfig::for_variant(variant);
        let calibration = CalibrationConfig {
            clip_eps: c.clip_eps.unwrap_or(defaults.clip_eps),
            lambda_min: c.lambda_min.unwrap_or(defaults.lambda_min),
            lambda_max: c.lambda_max.unwrap_or(defaults.lambda_max),
            eps_h: c.eps_h.unwrap_or(defaults.eps_h),
            ratio_mode: match &c.ratio_mode {
                Some(m) => m.parse::<RatioMode>()?,
                None => defaults.ratio_mode,
            },
            ..defaults
        };

        let mut cfg = TrainConfig::with_task(task, seed);
        cfg.calibration = calibration;
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.group_size = self.group_size.unwrap_or(cfg.group_size);
        cfg.inner_epochs = self.inner_epochs.unwrap_or(cfg.inner_epochs);
        cfg.learning_rate = self.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.snapshot_period = self.snapshot_period.unwrap_or(cfg.snapshot_period);
        cfg.trace = self.trace.unwrap_or(cfg.trace);
        cfg.validate()?;
        Ok(cfg)
    }
}
