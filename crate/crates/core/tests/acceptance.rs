//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use egpo::calibration::{calibrate_group, renormalize};
use egpo::cli::records::GroupRecord;
use egpo::cli::{cmd_train, TrainArgs};
use egpo::diagnostics::roc_auc;
use egpo::objective::{
    clip_active, group_loss, group_loss_and_grad, plateau_instance, random_instance, sequence_ratio, token_ratios,
    ScoredGroup, SoftmaxPolicy, Trajectory, DEFAULT_STEP,
};
use egpo::simulator::{train, TrainConfig};
use egpo::{CalibrationConfig, Group, GroupKind, RatioMode, Reward, Rollout, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn group_from(entropies: &[f64], rewards: &[i64]) -> Group {
    let rollouts = entropies
        .iter()
        .zip(rewards)
        .map(|(&h, &r)| Rollout::new("q", vec![-h], Reward::from_int(r).unwrap()).unwrap())
        .collect();
    Group::new("q", rollouts).unwrap()
}

fn random_group(rng: &mut ChaCha8Rng) -> Group {
    let n = rng.random_range(2..=16);
    let rollouts = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=12);
            let scale = [1e-4, 0.1, 1.0, 5.0][rng.random_range(0..4)];
            let lps = (0..len).map(|_| -scale * rng.random::<f64>()).collect();
            let reward = if rng.random_bool(0.5) {
                Reward::Correct
            } else {
                Reward::Incorrect
            };
            Rollout::new("q", lps, reward).unwrap()
        })
        .collect();
    Group::new("q", rollouts).unwrap()
}

fn worked_group() -> Outcome {
    let entropies = [0.5, 1.0, 1.5, 2.0];
    let rewards = [1, 1, -1, -1];
    // Hand oracle: mean H = 1.25, raw w = 1.25 / H, clip to [0.8, 2],
    // max(1, .) for correct, min(1, .) for incorrect; A = +-1 (std 1).
    let mean = entropies.iter().sum::<f64>() / 4.0;
    let expected: Vec<f64> = entropies
        .iter()
        .zip(rewards)
        .map(|(&h, r)| {
            let w = (mean / h).clamp(0.8, 2.0);
            if r > 0 {
                w.max(1.0)
            } else {
                -w.min(1.0)
            }
        })
        .collect();
    let cfg = CalibrationConfig {
        eps_h: 1e-12,
        ..CalibrationConfig::default()
    };
    let out = calibrate_group(&group_from(&entropies, &rewards), &cfg).unwrap();
    let literal = [2.0, 1.25, -0.8333333333333334, -0.8];
    let err = out
        .calibrated_adv
        .iter()
        .zip(&literal)
        .chain(out.calibrated_adv.iter().zip(&expected))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(err < 1e-9, format!("adv={:?} max err {err:e}", out.calibrated_adv))
}

fn asymmetric_clamp_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = CalibrationConfig::default();
    let (mut groups, mut weights, mut violations) = (0, 0, 0);
    while groups < 10_000 {
        let g = random_group(&mut rng);
        let out = calibrate_group(&g, &cfg).unwrap();
        if out.kind == GroupKind::AllCorrect {
            continue;
        }
        groups += 1;
        for (r, (&w, &raw)) in g.rewards().iter().zip(out.weight.iter().zip(&out.raw_weight)) {
            weights += 1;
            let clipped = raw.clamp(cfg.lambda_min, cfg.lambda_max);
            let ok = match r {
                Reward::Correct => w >= 1.0 && w == clipped.max(1.0),
                Reward::Incorrect => w <= 1.0 && w == clipped.min(1.0),
            };
            if !ok || !(cfg.lambda_min..=cfg.lambda_max).contains(&clipped) {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{groups} groups, {weights} weights, {violations} violations"),
    )
}

fn renorm_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = CalibrationConfig::for_variant(Variant::C5);
    let (mut worst, mut idem_fail) = (0.0f64, 0);
    for _ in 0..10_000 {
        let g = random_group(&mut rng);
        let out = calibrate_group(&g, &cfg).unwrap();
        let mean = out.weight.iter().sum::<f64>() / out.weight.len() as f64;
        worst = worst.max((mean - 1.0).abs());
        let once = renormalize(&out.weight).unwrap();
        if renormalize(&once).unwrap() != once || once != out.weight {
            idem_fail += 1;
        }
    }
    outcome(
        worst <= 1e-12 && idem_fail == 0,
        format!("max |mean - 1| = {worst:e}, idempotence failures {idem_fail}"),
    )
}

fn random_policy(rng: &mut ChaCha8Rng) -> SoftmaxPolicy {
    let (k, l, v) = (
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(2..=8),
    );
    let normal = Normal::new(0.0, 1.5).unwrap();
    SoftmaxPolicy::from_logits(k, l, v, (0..k * l * v).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn nsr_contrast() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut grpo_bad, mut egpo_bad, mut egpo_checked) = (0, 0, 0);
    for i in 0..1000 {
        let policy = random_policy(&mut rng);
        let context = rng.random_range(0..policy.num_contexts());
        let n = rng.random_range(2..=8);
        let reward = if i % 2 == 0 { Reward::Incorrect } else { Reward::Correct };
        let tokens: Vec<Vec<usize>> = (0..n).map(|_| policy.sample(context, &mut rng)).collect();
        let rollouts = tokens
            .iter()
            .map(|t| Rollout::new("q", policy.trajectory_logprobs(context, t), reward).unwrap())
            .collect();
        let group = Group::new("q", rollouts).unwrap();
        let scored = |adv: Vec<f64>| ScoredGroup {
            kind: group.kind(),
            trajectories: tokens
                .iter()
                .zip(group.rollouts())
                .map(|(t, r)| Trajectory {
                    context,
                    tokens: t.clone(),
                    old_logprobs: r.token_logprobs.clone(),
                })
                .collect(),
            advantages: adv,
        };

        let grpo = calibrate_group(&group, &CalibrationConfig::for_variant(Variant::Grpo)).unwrap();
        let rep = group_loss_and_grad(
            &policy,
            &[scored(grpo.calibrated_adv.clone())],
            0.2,
            RatioMode::SequenceLevel,
        )
        .unwrap();
        if grpo.calibrated_adv.iter().any(|&a| a != 0.0) || rep.gradient.iter().any(|&g| g != 0.0) {
            grpo_bad += 1;
        }

        if reward == Reward::Incorrect {
            let egpo = calibrate_group(&group, &CalibrationConfig::default()).unwrap();
            let rep =
                group_loss_and_grad(&policy, &[scored(egpo.calibrated_adv)], 0.2, RatioMode::SequenceLevel).unwrap();
            let any_uncertain = group
                .rollouts()
                .iter()
                .flat_map(|r| &r.token_logprobs)
                .any(|lp| lp.exp() < 1.0);
            if any_uncertain {
                egpo_checked += 1;
                let norm = rep.gradient_norm();
                if norm.is_nan() || norm <= 0.0 {
                    egpo_bad += 1;
                }
            }
        }
    }
    outcome(
        grpo_bad == 0 && egpo_bad == 0 && egpo_checked > 0,
        format!(
            "GRPO non-zero on {grpo_bad}/1000; EGPO zero gradient on {egpo_bad}/{egpo_checked} all-incorrect groups"
        ),
    )
}

/// Independent central differences over `group_loss`.
fn central_difference(policy: &SoftmaxPolicy, groups: &[ScoredGroup], eps: f64, mode: RatioMode, h: f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.logits().len())
        .map(|i| {
            let z = policy.logits()[i];
            p.logits_mut()[i] = z + h;
            let up = group_loss(&p, groups, eps, mode).unwrap();
            p.logits_mut()[i] = z - h;
            let down = group_loss(&p, groups, eps, mode).unwrap();
            p.logits_mut()[i] = z;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Default)]
struct Coverage {
    pos: usize,
    neg: usize,
    clip_hi: usize,
    clip_lo: usize,
    sequence: usize,
    token: usize,
}

fn gradient_correctness() -> Outcome {
    let h = DEFAULT_STEP;
    let mut cov = Coverage::default();
    let (mut worst, mut instances, mut skipped_logits) = (0.0f64, 0, 0);
    for seed in 0..200u64 {
        let inst = random_instance(seed);
        let eps = inst.clip_eps;
        let analytic = group_loss_and_grad(&inst.policy, &inst.groups, eps, inst.mode)
            .unwrap()
            .gradient;
        let numeric = central_difference(&inst.policy, &inst.groups, eps, inst.mode, h);
        let mut near = vec![false; analytic.len()];
        for g in inst.groups.iter().filter(|g| g.kind != GroupKind::AllCorrect) {
            for (tr, &adv) in g.trajectories.iter().zip(&g.advantages) {
                let new_lp = inst.policy.trajectory_logprobs(tr.context, &tr.tokens);
                let ratios = match inst.mode {
                    RatioMode::SequenceLevel => {
                        vec![sequence_ratio(&new_lp, &tr.old_logprobs).unwrap(); tr.tokens.len()]
                    }
                    RatioMode::TokenLevel => token_ratios(&new_lp, &tr.old_logprobs).unwrap(),
                };
                if adv > 0.0 {
                    cov.pos += 1;
                } else if adv < 0.0 {
                    cov.neg += 1;
                }
                for (t, &rho) in ratios.iter().enumerate() {
                    if clip_active(rho, adv, eps) {
                        if adv > 0.0 {
                            cov.clip_hi += 1;
                        } else {
                            cov.clip_lo += 1;
                        }
                    }
                    if (rho - (1.0 - eps)).abs() < 10.0 * h || (rho - (1.0 + eps)).abs() < 10.0 * h {
                        let o = inst.policy.slot_offset(tr.context, t);
                        near[o..o + inst.policy.vocab_size()].iter_mut().for_each(|m| *m = true);
                    }
                }
            }
        }
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            if near[i] {
                skipped_logits += 1;
                continue;
            }
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
        match inst.mode {
            RatioMode::SequenceLevel => cov.sequence += 1,
            RatioMode::TokenLevel => cov.token += 1,
        }
        instances += 1;
    }
    let covered = cov.pos > 0 && cov.neg > 0 && cov.clip_hi > 0 && cov.clip_lo > 0 && cov.sequence > 0 && cov.token > 0;
    outcome(
        worst < 1e-5 && covered && instances >= 100,
        format!(
            "{instances} instances, max rel err {worst:e}; A>0 {} A<0 {} clipped high {} low {} seq {} token {}; {skipped_logits} boundary logits skipped",
            cov.pos, cov.neg, cov.clip_hi, cov.clip_lo, cov.sequence, cov.token
        ),
    )
}

fn plateau() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        for mode in [RatioMode::SequenceLevel, RatioMode::TokenLevel] {
            let inst = plateau_instance(seed, mode);
            let analytic = group_loss_and_grad(&inst.policy, &inst.groups, inst.clip_eps, mode)
                .unwrap()
                .gradient;
            let numeric = central_difference(&inst.policy, &inst.groups, inst.clip_eps, mode, DEFAULT_STEP);
            for g in analytic.iter().chain(&numeric) {
                worst = worst.max(g.abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("100 instances, max |grad| {worst:e}"))
}

fn training_dynamics() -> Outcome {
    let seeds = 0..5u64;
    let mut grpo_ok = true;
    let mut grpo_vacuous = 0;
    let mut egpo_up = 0;
    let mut delta_pos = 0;
    let mut lines = Vec::new();
    for seed in seeds {
        let grpo = train(&TrainConfig::all_hard(seed).with_variant(Variant::Grpo)).unwrap();
        let egpo = train(&TrainConfig::all_hard(seed)).unwrap();
        if grpo.correct_samples == 0 {
            let drift = grpo
                .initial_gold_probs
                .iter()
                .zip(&grpo.final_gold_probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            grpo_ok &= drift <= 1e-6;
        } else {
            grpo_vacuous += 1;
        }
        let gain = egpo.final_gold_prob() - egpo.initial_gold_prob();
        if gain > 0.0 {
            egpo_up += 1;
        }
        let mixed = train(&TrainConfig::default_mixed(seed)).unwrap();
        let delta = mixed.final_delta();
        if delta.is_some_and(|d| d > 0.0) {
            delta_pos += 1;
        }
        lines.push(format!(
            "seed {seed}: egpo gold gain {gain:e}, mixed final delta {delta:?}"
        ));
    }
    println!("    {}", lines.join("\n    "));
    outcome(
        grpo_ok && egpo_up >= 4 && delta_pos >= 4,
        format!(
            "GRPO frozen: {grpo_ok} ({grpo_vacuous} runs with correct samples); EGPO gold up {egpo_up}/5; mixed delta > 0 {delta_pos}/5"
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut cases = 0;
    while cases < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        cases += 1;
        if roc_auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let mut transform_fail = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let f: Box<dyn Fn(f64) -> f64> = match rng.random_range(0..4) {
            0 => Box::new(move |x| a * x + b),
            1 => Box::new(move |x: f64| (a * x / 4.0).exp()),
            2 => Box::new(move |x: f64| x * x * x + a * x),
            _ => Box::new(move |x: f64| (x - b).atan()),
        };
        let transformed: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
        if roc_auc(&scores, &labels).unwrap() != roc_auc(&transformed, &labels).unwrap() {
            transform_fail += 1;
        }
    }
    outcome(
        mismatches == 0 && transform_fail == 0,
        format!("{mismatches}/1000 oracle mismatches, {transform_fail}/100 transform failures"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let args = TrainArgs {
            seed: Some(1),
            metrics: Some(dir.path().join(format!("{name}.csv"))),
            summary: Some(dir.path().join(format!("{name}.json"))),
            ..Default::default()
        };
        let out = cmd_train(&args).unwrap();
        std::fs::read(out.metrics_path).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let identical = a == b && !a.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut field_mismatch = 0;
    for _ in 0..1000 {
        let g = random_group(&mut rng);
        let rec = GroupRecord::from_group(&g);
        let line = serde_json::to_string(&rec).unwrap();
        let parsed: GroupRecord = serde_json::from_str(&line).unwrap();
        let regrouped = parsed.clone().into_group().unwrap();
        let again = serde_json::to_string(&GroupRecord::from_group(&regrouped)).unwrap();
        let v1: serde_json::Value = serde_json::from_str(&line).unwrap();
        let v2: serde_json::Value = serde_json::from_str(&again).unwrap();
        let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        if keys(&v1) != keys(&v2) || parsed.prompt_id != rec.prompt_id {
            field_mismatch += 1;
        }
        for (x, y) in rec.rollouts.iter().zip(&parsed.rollouts) {
            if x.reward != y.reward || x.token_logprobs.len() != y.token_logprobs.len() {
                field_mismatch += 1;
            }
            for (p, q) in x.token_logprobs.iter().zip(&y.token_logprobs) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    outcome(
        identical && worst <= 1e-12 && field_mismatch == 0,
        format!(
            "CSV identical: {identical} ({} bytes); round-trip max err {worst:e}, {field_mismatch} field mismatches",
            a.len()
        ),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "calibration oracle: worked group",
            Some(Duration::from_secs(1)),
            worked_group,
        ),
        ("asymmetric clamp invariant", None, asymmetric_clamp_invariant),
        ("renormalization invariant", None, renorm_invariant),
        (
            "advantage collapse / NSR contrast",
            Some(Duration::from_secs(10)),
            nsr_contrast,
        ),
        (
            "gradient correctness",
            Some(Duration::from_secs(30)),
            gradient_correctness,
        ),
        ("clipped plateau gradient", None, plateau),
        ("training dynamics", Some(Duration::from_secs(120)), training_dynamics),
        ("AUC oracle equivalence", None, auc_oracle),
        ("CLI determinism and round-trip", None, cli_determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed < b);
        let passed = out.passed && in_time;
        if !passed {
            failed += 1;
        }
        let budget_note = budget.map(|b| format!(" (budget {b:?})")).unwrap_or_default();
        println!(
            "{} {name}: {} [{elapsed:.2?}{budget_note}]",
            if passed { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
