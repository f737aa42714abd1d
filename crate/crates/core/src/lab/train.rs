//! Training loop: AdamW with linear warmup, optional global-norm clipping,
//! and per-step instrumentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::Mechanism;
use crate::seed::derive_seed;

use super::data::{markov_stream, MarkovDataConfig, TokenBatch};
use super::model::{masked_cross_entropy, Model};
use super::{EncoderConfig, TrainConfig};

/// One row of the training log. Non-finite values from a divergence are
/// recorded verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global L2 norm over all parameter gradients, measured after clipping
    /// when clipping is enabled.
    pub global_grad_norm: f64,
    pub layer0_max_abs_score: f64,
    pub layer0_max_weight_deriv: f64,
    /// Hash of the consumed batch; paired runs log identical columns.
    pub batch_hash: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

pub const TRAINING_LOG_CSV_HEADER: &str =
    "step,loss,global_grad_norm,layer0_max_abs_score,layer0_max_weight_deriv,batch_hash";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAINING_LOG_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step,
                s.loss,
                s.global_grad_norm,
                s.layer0_max_abs_score,
                s.layer0_max_weight_deriv,
                s.batch_hash
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Clip by global L2 norm. Returns `(pre_norm, post_norm)`; non-finite norms
/// leave the gradients untouched so divergence stays observable.
pub fn clip_global_norm(grads: &mut [f64], clip: f64) -> (f64, f64) {
    let pre = global_norm(grads);
    if pre.is_finite() && pre > clip {
        let scale = clip / pre;
        for g in grads.iter_mut() {
            *g *= scale;
        }
        (pre, global_norm(grads))
    } else {
        (pre, pre)
    }
}

/// AdamW state (first/second moments plus the step counter).
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamW {
    pub fn new(params: usize) -> Self {
        Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    /// One decoupled-weight-decay update. Decay applies only to segments
    /// flagged for it (weight matrices; not biases, norms, or embeddings).
    pub fn step(&mut self, model: &mut Model, grads: &[f64], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        for seg in model.segments().to_vec() {
            let range = seg.offset..seg.offset + seg.len;
            for i in range {
                let g = grads[i];
                self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g;
                self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                model.theta[i] -= lr * m_hat / (v_hat.sqrt() + tc.eps);
                if seg.decay {
                    model.theta[i] -= lr * tc.weight_decay * model.theta[i];
                }
            }
        }
    }
}

/// Run one training step on an explicit batch; returns the log row.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    tc: &TrainConfig,
    step: usize,
    batch: &TokenBatch,
) -> Result<StepRecord> {
    let (logits, cache) = model.forward(batch)?;
    let (loss, dlogits) = masked_cross_entropy(&logits, model.cfg.vocab_size, &batch.masked)?;
    let mut grads = model.backward(batch, &cache, &dlogits)?;
    let stats = model.layer0_score_stats(&cache);
    let logged_norm = match tc.clip_norm {
        Some(clip) => clip_global_norm(&mut grads, clip).1,
        None => global_norm(&grads),
    };
    let record = StepRecord {
        step,
        loss,
        global_grad_norm: logged_norm,
        layer0_max_abs_score: stats.max_abs_score,
        layer0_max_weight_deriv: stats.max_weight_deriv,
        batch_hash: batch.hash(),
    };
    optimizer.step(model, &grads, tc.lr_at(step), tc);
    Ok(record)
}

/// Train a fresh model on the given data stream. Divergence (non-finite
/// loss or gradients) is logged and training continues.
pub fn train(
    enc: &EncoderConfig,
    tc: &TrainConfig,
    stream: &mut dyn Iterator<Item = TokenBatch>,
) -> Result<(Model, TrainingLog)> {
    enc.validate()?;
    tc.validate()?;
    let mut model = Model::init(enc, derive_seed(tc.seed, "lab/model-init"))?;
    let mut optimizer = AdamW::new(model.num_params());
    let mut log = TrainingLog::default();
    for step in 0..tc.steps {
        let batch = stream.next().ok_or_else(|| {
            Error::EmptyInput(format!("data stream exhausted at step {step} of {}", tc.steps))
        })?;
        let record = train_step(&mut model, &mut optimizer, tc, step, &batch)?;
        log.steps.push(record);
    }
    Ok((model, log))
}

/// Default stream matching the encoder's vocabulary and context length.
pub fn default_stream(
    enc: &EncoderConfig,
    tc: &TrainConfig,
) -> Result<impl Iterator<Item = TokenBatch>> {
    markov_stream(MarkovDataConfig {
        vocab_size: enc.vocab_size,
        batch: tc.batch,
        max_len: enc.max_len,
        min_len: (enc.max_len / 4).max(1),
        mask_prob: tc.mask_prob,
        seed: derive_seed(tc.seed, "lab/data"),
    })
}

/// Train softmax and sigmoid variants of the same architecture on identical
/// data streams (shared seed); the two logs carry identical batch hashes.
pub fn run_paired(enc: &EncoderConfig, tc: &TrainConfig) -> Result<(TrainingLog, TrainingLog)> {
    let softmax_cfg = EncoderConfig {
        mechanism: Mechanism::Softmax,
        ..*enc
    };
    let sigmoid_cfg = EncoderConfig {
        mechanism: Mechanism::Sigmoid,
        ..*enc
    };
    let mut stream_a = default_stream(&softmax_cfg, tc)?;
    let (_, log_a) = train(&softmax_cfg, tc, &mut stream_a)?;
    let mut stream_b = default_stream(&sigmoid_cfg, tc)?;
    let (_, log_b) = train(&sigmoid_cfg, tc, &mut stream_b)?;
    Ok((log_a, log_b))
}
