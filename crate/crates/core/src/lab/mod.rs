//! Desk-scale masked-LM stability lab.
//!
//! A bidirectional transformer encoder (pre-norm by default, GELU MLP,
//! learned absolute positions) with fully manual analytic gradients, trained
//! with AdamW on a synthetic Markov-chain token stream over jagged-length
//! sequences. The attention sublayer routes through the blocked sigmoid
//! kernels or the dense softmax reference, so the lab exercises the same
//! code paths the rest of the crate verifies.
//!
//! Instrumentation per training step: loss, global gradient L2 norm
//! (post-clip when clipping is on), the largest |attention score| in layer
//! 0, and the largest attention-weight derivative in layer 0. Divergence is
//! data, not an error: non-finite values are recorded verbatim and training
//! continues.

mod data;
mod model;
mod train;
mod validate;


pub use data::{
    markov_stream, MarkovDataConfig, TokenBatch, FIRST_CONTENT_TOKEN, MASK_TOKEN, PAD_TOKEN,
};
pub use model::{masked_cross_entropy, ForwardCache, Model, ScoreStats};
pub use train::{
    clip_global_norm, default_stream, global_norm, run_paired, train, train_step, AdamW,
    StepRecord, TrainingLog, TRAINING_LOG_CSV_HEADER,
};
pub use validate::{validation_loss_mc, McValidation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::Mechanism;

/// Encoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// FFN intermediate dimension multiplier (4x hidden).
    pub ffn_mult: usize,
    /// Includes the pad and mask tokens (ids 0 and 1).
    pub vocab_size: usize,
    pub max_len: usize,
    pub mechanism: Mechanism,
    pub prenorm: bool,
    /// Kept at 0 at desk scale.
    pub dropout: f64,
}

impl EncoderConfig {
    /// Small config that trains in seconds on one core.
    pub fn desk_default(mechanism: Mechanism) -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            ffn_mult: 4,
            vocab_size: 64,
            max_len: 32,
            mechanism,
            prenorm: true,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Parameter(
                "layers, d_model, heads, ffn_mult must all be >= 1".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Parameter(
                "vocab must hold pad, mask, and at least one content token".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::Parameter("max_len must be >= 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Unsupported(
                "dropout is fixed at 0 at desk scale".into(),
            ));
        }
        Ok(())
    }
}

/// Optimization settings: AdamW with linear warmup then constant rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Clip by global L2 norm at this threshold; absent = no clipping
    /// (the stress-test setting).
    pub clip_norm: Option<f64>,
    pub mask_prob: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 100,
            batch: 8,
            clip_norm: Some(1.0),
            mask_prob: 0.15,
            seed: 42,
            weight_decay: 0.1,
            warmup_steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Parameter(format!(
                "mask_prob must lie in (0, 1) (got {})",
                self.mask_prob
            )));
        }
        // lr = 0 is allowed: it freezes the model, which is useful for
        // instrumentation checks.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be finite and >= 0 (got {})", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Parameter(format!(
                    "clip_norm must be finite and > 0 (got {c})"
                )));
            }
        }
        Ok(())
    }

    /// Linear warmup to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step + 1 >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}
