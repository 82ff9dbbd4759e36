use rand::Rng;

use crate::error::{Error, Result};

/// Tabular softmax policy indexed by (context, position, token).
///
/// Each (context, position) slot holds an independent row of `vocab_size`
/// logits; the probability of a token sequence factorizes over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    num_contexts: usize,
    horizon: usize,
    vocab_size: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn zeros(num_contexts: usize, horizon: usize, vocab_size: usize) -> Result<Self> {
        Self::from_logits(
            num_contexts,
            horizon,
            vocab_size,
            vec![0.0; num_contexts * horizon * vocab_size],
        )
    }

    pub fn from_logits(num_contexts: usize, horizon: usize, vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        if num_contexts == 0 || horizon == 0 || vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "policy shape K={num_contexts}, L={horizon}, V={vocab_size} needs K >= 1, L >= 1, V >= 2"
            )));
        }
        let expected = num_contexts * horizon * vocab_size;
        if logits.len() != expected {
            return Err(Error::LengthMismatch {
                what: "logit table vs K*L*V",
                left: logits.len(),
                right: expected,
            });
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logit {bad}")));
        }
        Ok(Self {
            num_contexts,
            horizon,
            vocab_size,
            logits,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Offset of the first logit of slot (context, position).
    pub fn slot_offset(&self, context: usize, position: usize) -> usize {
        (context * self.horizon + position) * self.vocab_size
    }

    pub fn slot(&self, context: usize, position: usize) -> &[f64] {
        let o = self.slot_offset(context, position);
        &self.logits[o..o + self.vocab_size]
    }

    pub fn slot_mut(&mut self, context: usize, position: usize) -> &mut [f64] {
        let o = self.slot_offset(context, position);
        let v = self.vocab_size;
        &mut self.logits[o..o + v]
    }

    pub fn probs(&self, context: usize, position: usize) -> Vec<f64> {
        softmax(self.slot(context, position))
    }

    pub fn log_prob(&self, context: usize, position: usize, token: usize) -> f64 {
        let row = self.slot(context, position);
        row[token] - log_sum_exp(row)
    }

    /// Per-token log-probabilities of `tokens` emitted at positions 0, 1, ...
    pub fn trajectory_logprobs(&self, context: usize, tokens: &[usize]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.log_prob(context, t, tok))
            .collect()
    }

    /// Samples one token per position for `context`.
    pub fn sample<R: Rng + ?Sized>(&self, context: usize, rng: &mut R) -> Vec<usize> {
        (0..self.horizon)
            .map(|t| sample_categorical(&self.probs(context, t), rng.random::<f64>()))
            .collect()
    }

    /// `self += scale * direction`, elementwise over the logit table.
    pub fn step(&mut self, direction: &[f64], scale: f64) {
        for (z, g) in self.logits.iter_mut().zip(direction) {
            *z += scale * g;
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverse-CDF draw; `u` is uniform in [0, 1).
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off left `acc` just below 1; fall back to the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
