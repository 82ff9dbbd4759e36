//! Uncertainty analyses over rollout logs: entropy gap, rank-based ROC-AUC,
//! thinking/answer split, length association, and the boxed-answer verifier.

use serde::Serialize;

use crate::entropy::segment_entropy;
use crate::error::{Error, Result};
use crate::model::{Reward, Rollout};

pub const HISTOGRAM_BINS: usize = 64;

const BOXED: &str = "\\boxed{";

/// Content of the last `\boxed{...}`, or `None` if absent or unbalanced.
pub fn extract_boxed(text: &str) -> Option<&str> {
    let start = text.rfind(BOXED)? + BOXED.len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Exact match of the boxed answer against `gold`, both trimmed.
pub fn verify_answer(text: &str, gold: &str) -> Reward {
    match extract_boxed(text) {
        Some(ans) if ans.trim() == gold.trim() => Reward::Correct,
        _ => Reward::Incorrect,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyGap {
    pub mu_correct: f64,
    pub mu_incorrect: f64,
    pub delta: f64,
}

/// Class means and `delta = mu_incorrect - mu_correct`.
pub fn entropy_gap(records: &[(f64, bool)]) -> Result<EntropyGap> {
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for &(h, correct) in records {
        if correct {
            sc += h;
            nc += 1;
        } else {
            si += h;
            ni += 1;
        }
    }
    if nc == 0 {
        return Err(Error::MissingClass("correct"));
    }
    if ni == 0 {
        return Err(Error::MissingClass("incorrect"));
    }
    let mu_correct = sc / nc as f64;
    let mu_incorrect = si / ni as f64;
    Ok(EntropyGap {
        mu_correct,
        mu_incorrect,
        delta: mu_incorrect - mu_correct,
    })
}

/// 1-based ranks, ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    Ok(ranks)
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::MissingClass("incorrect"));
    }
    if neg == 0 {
        return Err(Error::MissingClass("correct"));
    }
    Ok((pos, neg))
}

/// Probability that a positive (`true`, incorrect) outscores a negative,
/// ties counting one half. Mann-Whitney U over average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let (pos, neg) = class_counts(labels)?;
    let ranks = average_ranks(scores)?;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC curve as (false positive rate, true positive rate), from (0,0) to (1,1),
/// one point per distinct score threshold.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let (pos, neg) = class_counts(labels)?;
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Fixed-width bins over `[lo, hi]`; the last bin is closed.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0usize; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let idx = if width > 0.0 {
                (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
            } else {
                0
            };
            counts[idx] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + width * bin as f64, self.lo + width * (bin + 1) as f64)
    }
}

/// Per-class histograms sharing one range, the observed min..max.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassHistograms {
    pub correct: Histogram,
    pub incorrect: Histogram,
}

pub fn class_histograms(records: &[(f64, bool)], bins: usize) -> ClassHistograms {
    let lo = records.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let split = |want: bool| -> Vec<f64> { records.iter().filter(|r| r.1 == want).map(|r| r.0).collect() };
    ClassHistograms {
        correct: Histogram::new(&split(true), lo, hi, bins),
        incorrect: Histogram::new(&split(false), lo, hi, bins),
    }
}

/// One rollout reduced to what the diagnostics need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyRecord {
    pub total: f64,
    pub thinking: Option<f64>,
    pub answer: Option<f64>,
    pub correct: bool,
    pub length: usize,
}

impl EntropyRecord {
    pub fn from_rollout(r: &Rollout) -> Result<Self> {
        let seg = segment_entropy(r)?;
        Ok(Self {
            total: seg.total,
            thinking: seg.thinking,
            answer: seg.answer,
            correct: r.reward.is_correct(),
            length: r.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeAeReport {
    pub auc_te: f64,
    pub auc_ae: f64,
    pub te: ClassHistograms,
    pub ae: ClassHistograms,
    /// (length, answer entropy) for every record with an answer segment.
    pub length_ae: Vec<(usize, f64)>,
}

fn segment_auc(pairs: &[(f64, bool)]) -> Result<f64> {
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| !p.1).collect();
    roc_auc(&scores, &labels)
}

/// AUC of thinking and answer entropy for predicting incorrectness.
///
/// Each AUC uses only the records where that segment is non-empty.
pub fn te_ae_report(records: &[EntropyRecord]) -> Result<TeAeReport> {
    let te: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.thinking.map(|h| (h, r.correct)))
        .collect();
    if te.is_empty() {
        return Err(Error::NoSpans);
    }
    let ae: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.answer.map(|h| (h, r.correct)))
        .collect();
    Ok(TeAeReport {
        auc_te: segment_auc(&te)?,
        auc_ae: segment_auc(&ae)?,
        te: class_histograms(&te, HISTOGRAM_BINS),
        ae: class_histograms(&ae, HISTOGRAM_BINS),
        length_ae: records.iter().filter_map(|r| r.answer.map(|h| (r.length, h))).collect(),
    })
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "x vs y",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::DegenerateInput("rank correlation needs at least 3 records"));
    }
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("all lengths are identical"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateInput("all entropies are identical"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn length_entropy_association(records: &[(usize, f64)]) -> Result<f64> {
    let lengths: Vec<f64> = records.iter().map(|r| r.0 as f64).collect();
    let entropies: Vec<f64> = records.iter().map(|r| r.1).collect();
    spearman(&lengths, &entropies)
}
