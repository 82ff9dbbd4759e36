//! Desk-scale training laboratory on synthetic verifiable tasks.
//!
//! A task has `K` contexts; each response is `L` tokens from a vocabulary of
//! `V`. Positions `0..L-1` are filler, position `L-1` is the answer, and the
//! verifier rewards +1 iff the answer token equals the context's gold token.
//! Hard contexts start with a depressed gold logit.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::calibration::calibrate_group;
use crate::error::{Error, Result};
use crate::model::{CalibratedGroup, CalibrationConfig, Group, GroupKind, Reward, Rollout, Variant};
use crate::objective::{group_loss_and_grad, ScoredGroup, SoftmaxPolicy, Trajectory};

/// Initial gold-logit depression per unit hardness on the default task.
pub const DEFAULT_GOLD_DEPTH: f64 = 4.0;
/// Depression used by the all-hard task; puts gold probability below 2^-20.
pub const ALL_HARD_GOLD_DEPTH: f64 = 16.0;
/// Std of the initial logit noise.
pub const INIT_NOISE: f64 = 0.1;

/// SplitMix64 finalizer used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a sub-stream identified by `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub horizon: usize,
    pub gold_token: Vec<usize>,
    pub hardness: Vec<f64>,
    pub gold_depth: f64,
}

impl SyntheticTask {
    pub fn new(
        vocab_size: usize,
        horizon: usize,
        gold_token: Vec<usize>,
        hardness: Vec<f64>,
        gold_depth: f64,
    ) -> Result<Self> {
        if vocab_size < 2 || horizon == 0 || gold_token.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "task needs V >= 2, L >= 1, K >= 1 (got V={vocab_size}, L={horizon}, K={})",
                gold_token.len()
            )));
        }
        if gold_token.len() != hardness.len() {
            return Err(Error::LengthMismatch {
                what: "gold tokens vs hardness",
                left: gold_token.len(),
                right: hardness.len(),
            });
        }
        if let Some(g) = gold_token.iter().find(|&&g| g >= vocab_size) {
            return Err(Error::InvalidConfig(format!(
                "gold token {g} >= vocab size {vocab_size}"
            )));
        }
        if let Some(h) = hardness.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return Err(Error::InvalidConfig(format!("hardness {h} outside [0, 1]")));
        }
        if !(gold_depth >= 0.0 && gold_depth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gold depth {gold_depth} must be finite and >= 0"
            )));
        }
        Ok(Self {
            vocab_size,
            horizon,
            gold_token,
            hardness,
            gold_depth,
        })
    }

    /// Default task: hardness 0, 0.5, 1 in proportion 1/2, 1/4, 1/4.
    pub fn mixed(num_contexts: usize, vocab_size: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7A5C]));
        let half = num_contexts / 2;
        let quarter = num_contexts / 4;
        let mut hardness: Vec<f64> = (0..num_contexts)
            .map(|i| {
                if i < half {
                    0.0
                } else if i < half + quarter {
                    0.5
                } else {
                    1.0
                }
            })
            .collect();
        hardness.shuffle(&mut rng);
        let gold = (0..num_contexts)
            .map(|_| rng.random_range(0..vocab_size.max(1)))
            .collect();
        Self::new(vocab_size, horizon, gold, hardness, DEFAULT_GOLD_DEPTH)
    }

    /// Every context at hardness 1 with a deep gold depression.
    pub fn all_hard(
        num_contexts: usize,
        vocab_size: usize,
        horizon: usize,
        gold_depth: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7A5C]));
        let gold = (0..num_contexts)
            .map(|_| rng.random_range(0..vocab_size.max(1)))
            .collect();
        Self::new(vocab_size, horizon, gold, vec![1.0; num_contexts], gold_depth)
    }

    pub fn num_contexts(&self) -> usize {
        self.gold_token.len()
    }

    /// +1 iff the final token is the gold token.
    pub fn verify(&self, context: usize, tokens: &[usize]) -> Reward {
        match tokens.last() {
            Some(&t) if t == self.gold_token[context] => Reward::Correct,
            _ => Reward::Incorrect,
        }
    }

    pub fn gold_probs(&self, policy: &SoftmaxPolicy) -> Vec<f64> {
        (0..self.num_contexts())
            .map(|c| policy.probs(c, self.horizon - 1)[self.gold_token[c]])
            .collect()
    }
}

/// Logits ~ N(0, 0.1^2); the gold answer logit is shifted by
/// `-gold_depth * hardness`.
pub fn init_policy(task: &SyntheticTask, seed: u64) -> SoftmaxPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_NOISE).expect("valid std");
    let k = task.num_contexts();
    let logits = (0..k * task.horizon * task.vocab_size)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let mut policy =
        SoftmaxPolicy::from_logits(k, task.horizon, task.vocab_size, logits).expect("task shape validated");
    for c in 0..k {
        let shift = task.gold_depth * task.hardness[c];
        policy.slot_mut(c, task.horizon - 1)[task.gold_token[c]] -= shift;
    }
    policy
}

/// A group together with the token sequences that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub context: usize,
    pub tokens: Vec<Vec<usize>>,
    pub group: Group,
}

impl SampledGroup {
    pub fn scored(&self, advantages: Vec<f64>) -> ScoredGroup {
        ScoredGroup {
            kind: self.group.kind(),
            trajectories: self
                .tokens
                .iter()
                .zip(self.group.rollouts())
                .map(|(tokens, r)| Trajectory {
                    context: self.context,
                    tokens: tokens.clone(),
                    old_logprobs: r.token_logprobs.clone(),
                })
                .collect(),
            advantages,
        }
    }
}

pub fn sample_group(
    policy_old: &SoftmaxPolicy,
    task: &SyntheticTask,
    context: usize,
    n: usize,
    seed: u64,
) -> Result<SampledGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt_id = format!("ctx{context}");
    let mut tokens = Vec::with_capacity(n);
    let mut rollouts = Vec::with_capacity(n);
    for _ in 0..n {
        let seq = policy_old.sample(context, &mut rng);
        let logprobs = policy_old.trajectory_logprobs(context, &seq);
        rollouts.push(Rollout::new(prompt_id.clone(), logprobs, task.verify(context, &seq))?);
        tokens.push(seq);
    }
    Ok(SampledGroup {
        context,
        tokens,
        group: Group::new(prompt_id, rollouts)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: SyntheticTask,
    pub group_size: usize,
    pub steps: usize,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub calibration: CalibrationConfig,
    pub snapshot_period: usize,
    /// Keep every step's calibrated groups in the run (memory heavy).
    pub trace: bool,
}

impl TrainConfig {
    /// K=32, V=8, L=4, N=8, S=200, E=2, lr=0.1 on the mixed-hardness task.
    pub fn default_mixed(seed: u64) -> Self {
        Self::with_task(SyntheticTask::mixed(32, 8, 4, seed).expect("static shape"), seed)
    }

    /// All contexts hard, L=2, gold probability below 2^-20.
    pub fn all_hard(seed: u64) -> Self {
        Self::with_task(
            SyntheticTask::all_hard(32, 8, 2, ALL_HARD_GOLD_DEPTH, seed).expect("static shape"),
            seed,
        )
    }

    pub fn with_task(task: SyntheticTask, seed: u64) -> Self {
        Self {
            task,
            group_size: 8,
            steps: 200,
            inner_epochs: 2,
            learning_rate: 0.1,
            seed,
            calibration: CalibrationConfig::default(),
            snapshot_period: 1,
            trace: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.calibration = self.calibration.with_variant(variant);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::InvalidConfig("inner_epochs must be >= 1".into()));
        }
        if self.snapshot_period == 0 {
            return Err(Error::InvalidConfig("snapshot_period must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.calibration.validate()
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub accuracy: f64,
    pub mu_correct: Option<f64>,
    pub mu_incorrect: Option<f64>,
    pub delta: Option<f64>,
    pub mixed: usize,
    pub all_correct: usize,
    pub all_incorrect: usize,
    /// Gradient norm and loss of the first inner epoch.
    pub grad_norm: f64,
    pub loss: f64,
    /// Fraction of contributing rollouts on the clip branch in the last epoch.
    pub clipped_fraction: f64,
    /// Mean gold-token probability after the step's update.
    pub gold_prob: f64,
}

pub const CSV_HEADER: &str =
    "step,accuracy,mu_correct,mu_incorrect,delta,mixed,all_correct,all_incorrect,grad_norm,loss,clipped_fraction,gold_prob";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.accuracy,
            opt(self.mu_correct),
            opt(self.mu_incorrect),
            opt(self.delta),
            self.mixed,
            self.all_correct,
            self.all_incorrect,
            self.grad_norm,
            self.loss,
            self.clipped_fraction,
            self.gold_prob
        )
    }
}

pub fn metrics_csv(history: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<StepMetrics>,
    pub initial_gold_probs: Vec<f64>,
    pub final_gold_probs: Vec<f64>,
    pub final_policy: SoftmaxPolicy,
    /// Total number of correct rollouts sampled during the run.
    pub correct_samples: usize,
    /// Calibrated groups per step, only when `config.trace` is set.
    pub trace: Vec<Vec<CalibratedGroup>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub final_accuracy: f64,
    /// Mean entropy gap over the final 10% of steps.
    pub final_delta: Option<f64>,
    pub initial_gold_prob: f64,
    pub final_gold_prob: f64,
    pub gold_prob_improvement: f64,
    pub correct_samples: usize,
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl TrainRun {
    /// Mean of Δ over the last `ceil(S / 10)` steps that have both classes.
    pub fn final_delta(&self) -> Option<f64> {
        let tail = self.history.len().div_ceil(10).max(1);
        let deltas: Vec<f64> = self.history[self.history.len() - tail..]
            .iter()
            .filter_map(|m| m.delta)
            .collect();
        (!deltas.is_empty()).then(|| mean_of(&deltas))
    }

    pub fn initial_gold_prob(&self) -> f64 {
        mean_of(&self.initial_gold_probs)
    }

    pub fn final_gold_prob(&self) -> f64 {
        mean_of(&self.final_gold_probs)
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.history.last().expect("steps >= 1");
        RunSummary {
            variant: self.config.calibration.variant,
            seed: self.config.seed,
            steps: self.history.len(),
            final_accuracy: last.accuracy,
            final_delta: self.final_delta(),
            initial_gold_prob: self.initial_gold_prob(),
            final_gold_prob: self.final_gold_prob(),
            gold_prob_improvement: self.final_gold_prob() - self.initial_gold_prob(),
            correct_samples: self.correct_samples,
        }
    }
}

fn class_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| mean_of(values))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let task = &cfg.task;
    let k = task.num_contexts();
    let mut policy = init_policy(task, derive_seed(cfg.seed, &[0x1]));
    let initial_gold_probs = task.gold_probs(&policy);
    let mut old = policy.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut trace = Vec::new();
    let mut correct_samples = 0usize;

    for step in 0..cfg.steps {
        let abort = |e: Error| Error::TrainingAborted {
            step,
            source: Box::new(e),
        };
        if step % cfg.snapshot_period == 0 {
            old = policy.clone();
        }
        let mut scored = Vec::with_capacity(k);
        let mut calibrated = Vec::with_capacity(k);
        let (mut correct_h, mut incorrect_h) = (Vec::new(), Vec::new());
        let (mut mixed, mut all_correct, mut all_incorrect) = (0, 0, 0);
        for c in 0..k {
            let sampled = sample_group(
                &old,
                task,
                c,
                cfg.group_size,
                derive_seed(cfg.seed, &[0x2, step as u64, c as u64]),
            )
            .map_err(abort)?;
            let cal = calibrate_group(&sampled.group, &cfg.calibration).map_err(abort)?;
            match cal.kind {
                GroupKind::Mixed => mixed += 1,
                GroupKind::AllCorrect => all_correct += 1,
                GroupKind::AllIncorrect => all_incorrect += 1,
            }
            for (r, &h) in sampled.group.rollouts().iter().zip(&cal.entropy) {
                if r.reward.is_correct() {
                    correct_h.push(h);
                } else {
                    incorrect_h.push(h);
                }
            }
            scored.push(sampled.scored(cal.calibrated_adv.clone()));
            calibrated.push(cal);
        }
        correct_samples += correct_h.len();

        let mut first = None;
        let mut clipped_fraction = 0.0;
        for _ in 0..cfg.inner_epochs {
            let report = group_loss_and_grad(&policy, &scored, cfg.calibration.clip_eps, cfg.calibration.ratio_mode)
                .map_err(abort)?;
            policy.step(&report.gradient, cfg.learning_rate);
            if policy.logits().iter().any(|z| !z.is_finite()) {
                return Err(abort(Error::NonFinite("logit after update".into())));
            }
            let clipped = report.terms.iter().filter(|t| t.clipped).count();
            clipped_fraction = if report.terms.is_empty() {
                0.0
            } else {
                clipped as f64 / report.terms.len() as f64
            };
            first.get_or_insert((report.gradient_norm(), report.loss));
        }
        let (grad_norm, loss) = first.expect("inner_epochs >= 1");

        let mu_correct = class_mean(&correct_h);
        let mu_incorrect = class_mean(&incorrect_h);
        let total = correct_h.len() + incorrect_h.len();
        history.push(StepMetrics {
            step,
            accuracy: correct_h.len() as f64 / total as f64,
            mu_correct,
            mu_incorrect,
            delta: mu_correct.zip(mu_incorrect).map(|(c, i)| i - c),
            mixed,
            all_correct,
            all_incorrect,
            grad_norm,
            loss,
            clipped_fraction,
            gold_prob: mean_of(&task.gold_probs(&policy)),
        });
        if cfg.trace {
            trace.push(calibrated);
        }
    }

    Ok(TrainRun {
        config: cfg.clone(),
        history,
        initial_gold_probs,
        final_gold_probs: task.gold_probs(&policy),
        final_policy: policy,
        correct_samples,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub runs: Vec<TrainRun>,
}

impl Ablation {
    pub fn run(&self, variant: Variant) -> Option<&TrainRun> {
        self.runs.iter().find(|r| r.config.calibration.variant == variant)
    }

    /// Markdown comparison table, one row per variant.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "| variant | final accuracy | final delta | gold prob improvement | mean weight | mean |adv| |\n|---|---|---|---|---|---|\n",
        );
        for run in &self.runs {
            let s = run.summary();
            let (mut w_sum, mut a_sum, mut n) = (0.0, 0.0, 0usize);
            for g in run.trace.iter().flatten() {
                w_sum += g.weight.iter().sum::<f64>();
                a_sum += g.calibrated_adv.iter().map(|a| a.abs()).sum::<f64>();
                n += g.len();
            }
            let fmt_mean = |x: f64| {
                if n == 0 {
                    "-".to_string()
                } else {
                    format!("{:.4}", x / n as f64)
                }
            };
            let _ = writeln!(
                out,
                "| {} | {:.4} | {} | {:.3e} | {} | {} |",
                s.variant,
                s.final_accuracy,
                s.final_delta.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into()),
                s.gold_prob_improvement,
                fmt_mean(w_sum),
                fmt_mean(a_sum),
            );
        }
        out
    }
}

/// Runs the same task and seed under every requested variant, in parallel.
pub fn run_ablation(base: &TrainConfig, variants: &[Variant]) -> Result<Ablation> {
    let configs: Vec<TrainConfig> = variants.iter().map(|&v| base.clone().with_variant(v)).collect();
    let results: Vec<Result<TrainRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|cfg| s.spawn(move || train(cfg))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    Ok(Ablation {
        runs: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
