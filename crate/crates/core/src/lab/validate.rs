//! Monte Carlo validation loss: repeated random masking trials per sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::data::{TokenBatch, MASK_TOKEN, PAD_TOKEN};
use super::model::{masked_cross_entropy, Model};

/// Monte Carlo validation-loss estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McValidation {
    /// Mean over sequences of the per-sequence trial means.
    pub mean_loss: f64,
    /// 95% normal-approximation half-width over sequences.
    pub ci_half_width: f64,
    pub per_sequence: Vec<f64>,
    /// Sequences skipped for having no maskable (non-special) tokens.
    pub skipped: usize,
    pub trials: usize,
}

/// Estimate validation loss by `trials` independent masking draws per
/// sequence: each trial masks `mask_prob` of the non-special tokens (at
/// least one) and scores mean cross-entropy over the masked set.
///
/// Deterministic for a fixed seed: trial `t` of sequence `i` uses its own
/// derived RNG stream.
pub fn validation_loss_mc(
    model: &Model,
    sequences: &[Vec<u32>],
    trials: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<McValidation> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("validation needs at least one sequence".into()));
    }
    if trials == 0 {
        return Err(Error::Parameter("trials must be >= 1".into()));
    }
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Parameter("mask_prob must lie in (0, 1)".into()));
    }
    let mut per_sequence = Vec::new();
    let mut skipped = 0usize;
    for (i, seq) in sequences.iter().enumerate() {
        if seq.is_empty() || seq.len() > model.cfg.max_len {
            return Err(Error::Dimension(format!(
                "sequence {i} has length {} (model max_len {})",
                seq.len(),
                model.cfg.max_len
            )));
        }
        let maskable: Vec<usize> = seq
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD_TOKEN && t != MASK_TOKEN)
            .map(|(p, _)| p)
            .collect();
        if maskable.is_empty() {
            skipped += 1;
            continue;
        }
        let count = ((mask_prob * maskable.len() as f64).round() as usize).clamp(1, maskable.len());
        let mut trial_sum = 0.0;
        for t in 0..trials {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("val/{i}/{t}")));
            let picks = rand::seq::index::sample(&mut rng, maskable.len(), count);
            let mut tokens = seq.clone();
            let mut masked: Vec<(usize, u32)> = picks
                .iter()
                .map(|p| {
                    let pos = maskable[p];
                    let original = tokens[pos];
                    tokens[pos] = MASK_TOKEN;
                    (pos, original)
                })
                .collect();
            masked.sort_unstable();
            let batch = TokenBatch {
                tokens,
                lengths: vec![seq.len()],
                batch_size: 1,
                max_len: seq.len(),
                masked,
            };
            let (logits, _) = model.forward(&batch)?;
            let (loss, _) = masked_cross_entropy(&logits, model.cfg.vocab_size, &batch.masked)?;
            trial_sum += loss;
        }
        per_sequence.push(trial_sum / trials as f64);
    }
    if per_sequence.is_empty() {
        return Err(Error::EmptyInput(
            "every sequence was skipped (no maskable tokens)".into(),
        ));
    }
    let n = per_sequence.len() as f64;
    let mean = per_sequence.iter().sum::<f64>() / n;
    let ci = if per_sequence.len() > 1 {
        let var = per_sequence.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(McValidation {
        mean_loss: mean,
        ci_half_width: ci,
        per_sequence,
        skipped,
        trials,
    })
}
