//! Synthetic masked-LM data: seeded Markov chains over a small vocabulary
//! with jagged sequence lengths.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const PAD_TOKEN: u32 = 0;
pub const MASK_TOKEN: u32 = 1;
pub const FIRST_CONTENT_TOKEN: u32 = 2;

/// One training batch: padded token matrix with masking already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// Input tokens, `[batch_size * max_len]`, masked positions replaced by
    /// [`MASK_TOKEN`], pad positions holding [`PAD_TOKEN`].
    pub tokens: Vec<u32>,
    /// Valid length per sequence.
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub max_len: usize,
    /// `(flat position, original token)` for every masked position.
    pub masked: Vec<(usize, u32)>,
}

impl TokenBatch {
    /// FNV-1a over tokens, lengths, and mask targets. Two runs consuming the
    /// same data stream log identical hashes.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.batch_size as u64);
        eat(self.max_len as u64);
        for &l in &self.lengths {
            eat(l as u64);
        }
        for &t in &self.tokens {
            eat(t as u64);
        }
        for &(pos, target) in &self.masked {
            eat(pos as u64);
            eat(target as u64);
        }
        h
    }
}

/// Configuration of the synthetic stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovDataConfig {
    pub vocab_size: usize,
    pub batch: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl MarkovDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT_TOKEN as usize + 1 {
            return Err(Error::Parameter(
                "vocab must hold pad, mask, and at least one content token".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Parameter(format!(
                "need 1 <= min_len <= max_len (got {}..{})",
                self.min_len, self.max_len
            )));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be >= 1".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Parameter("mask_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Row-stochastic transition table with a few preferred successors per
/// symbol, so there is learnable structure.
struct MarkovChain {
    content: usize,
    cdf: Vec<f64>,
}

impl MarkovChain {
    fn new(content: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preferred = 4.min(content);
        let mut cdf = vec![0.0; content * content];
        let mut row = vec![0.0; content];
        for s in 0..content {
            let base = 0.1 / content as f64;
            row.iter_mut().for_each(|p| *p = base);
            for _ in 0..preferred {
                let t = rng.random_range(0..content);
                row[t] += 0.9 / preferred as f64;
            }
            let mut acc = 0.0;
            for t in 0..content {
                acc += row[t];
                cdf[s * content + t] = acc;
            }
            cdf[s * content + content - 1] = 1.0;
        }
        Self { content, cdf }
    }

    fn step(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let row = &self.cdf[state * self.content..(state + 1) * self.content];
        match row.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => i.min(self.content - 1),
        }
    }
}

/// Deterministic infinite stream of masked batches.
pub fn markov_stream(cfg: MarkovDataConfig) -> Result<impl Iterator<Item = TokenBatch>> {
    cfg.validate()?;
    let content = cfg.vocab_size - FIRST_CONTENT_TOKEN as usize;
    let chain = MarkovChain::new(content, derive_seed(cfg.seed, "lab/chain"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "lab/stream"));
    Ok(std::iter::from_fn(move || {
        let mut tokens = vec![PAD_TOKEN; cfg.batch * cfg.max_len];
        let mut lengths = Vec::with_capacity(cfg.batch);
        let mut masked = Vec::new();
        for b in 0..cfg.batch {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            lengths.push(len);
            let mut state = rng.random_range(0..content);
            for l in 0..len {
                tokens[b * cfg.max_len + l] = state as u32 + FIRST_CONTENT_TOKEN;
                state = chain.step(state, &mut rng);
            }
            // Mask ~mask_prob of the (all content) valid positions, at
            // least one.
            let count = ((cfg.mask_prob * len as f64).round() as usize).clamp(1, len);
            let picks = rand::seq::index::sample(&mut rng, len, count);
            for p in picks.iter() {
                let flat = b * cfg.max_len + p;
                masked.push((flat, tokens[flat]));
                tokens[flat] = MASK_TOKEN;
            }
        }
        masked.sort_unstable();
        Some(TokenBatch {
            tokens,
            lengths,
            batch_size: cfg.batch,
            max_len: cfg.max_len,
            masked,
        })
    }))
}
