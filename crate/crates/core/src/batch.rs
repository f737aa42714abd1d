//! Jagged (variable-length) padded attention batches.
//!
//! A [`JaggedBatch`] carries padded `[Z, L, H, D]` Q/K/V tensors plus the
//! per-sequence valid lengths `n_q`, `n_k`. Pad positions are zero-filled by
//! convention, but no operation in this crate may depend on the fill: masking
//! happens at score level, which is what makes "output independent of pad
//! content" a testable property (tests deliberately poison the pad region).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor4};

/// Padded Q/K/V tensors with per-sequence valid lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct JaggedBatch<T> {
    /// Queries, `[Z, L_q, H, D]`.
    pub q: Tensor4<T>,
    /// Keys, `[Z, L_k, H, D]`.
    pub k: Tensor4<T>,
    /// Values, `[Z, L_k, H, D]`.
    pub v: Tensor4<T>,
    /// Valid query tokens per sequence, `1 <= n_q[z] <= L_q`.
    pub n_q: Vec<usize>,
    /// Valid key tokens per sequence, `1 <= n_k[z] <= L_k`.
    pub n_k: Vec<usize>,
}

impl<T: Real> JaggedBatch<T> {
    /// Validating constructor. Checks shapes, length bounds, and that the pad
    /// region is zero-filled.
    pub fn new(
        q: Tensor4<T>,
        k: Tensor4<T>,
        v: Tensor4<T>,
        n_q: Vec<usize>,
        n_k: Vec<usize>,
    ) -> Result<Self> {
        let batch = Self::from_parts(q, k, v, n_q, n_k)?;
        batch.check_pad_zero()?;
        Ok(batch)
    }

    /// Constructor that validates shapes and length bounds but not the pad
    /// fill. Used where pad contents are intentionally arbitrary (poison
    /// tests) or freshly projected (the training lab zeroes them itself).
    pub fn from_parts(
        q: Tensor4<T>,
        k: Tensor4<T>,
        v: Tensor4<T>,
        n_q: Vec<usize>,
        n_k: Vec<usize>,
    ) -> Result<Self> {
        let [z, l_q, h, d] = q.dims();
        let kd = k.dims();
        let vd = v.dims();
        if z == 0 || h == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "Z, H, D must all be >= 1 (got Z={z}, H={h}, D={d})"
            )));
        }
        if l_q == 0 || kd[1] == 0 {
            return Err(Error::Dimension("padded lengths must be >= 1".into()));
        }
        if kd != vd {
            return Err(Error::Dimension(format!(
                "k dims {kd:?} and v dims {vd:?} differ"
            )));
        }
        if kd[0] != z || kd[2] != h || kd[3] != d {
            return Err(Error::Dimension(format!(
                "q dims {:?} and k dims {kd:?} disagree outside the length axis",
                q.dims()
            )));
        }
        if n_q.len() != z || n_k.len() != z {
            return Err(Error::Dimension(format!(
                "length vectors must have {} entries (got {} and {})",
                z,
                n_q.len(),
                n_k.len()
            )));
        }
        let l_k = kd[1];
        for zz in 0..z {
            if n_q[zz] == 0 || n_q[zz] > l_q {
                return Err(Error::Dimension(format!(
                    "n_q[{zz}] = {} out of range 1..={l_q}",
                    n_q[zz]
                )));
            }
            if n_k[zz] == 0 || n_k[zz] > l_k {
                return Err(Error::Dimension(format!(
                    "n_k[{zz}] = {} out of range 1..={l_k}",
                    n_k[zz]
                )));
            }
        }
        Ok(Self { q, k, v, n_q, n_k })
    }

    fn check_pad_zero(&self) -> Result<()> {
        let [z, l_q, h, _d] = self.q.dims();
        let l_k = self.k.dims()[1];
        for zz in 0..z {
            for l in self.n_q[zz]..l_q {
                for hh in 0..h {
                    if self.q.row(zz, l, hh).iter().any(|x| *x != T::zero()) {
                        return Err(Error::Validation(format!(
                            "q pad region not zero at (z={zz}, l={l})"
                        )));
                    }
                }
            }
            for l in self.n_k[zz]..l_k {
                for hh in 0..h {
                    if self.k.row(zz, l, hh).iter().any(|x| *x != T::zero())
                        || self.v.row(zz, l, hh).iter().any(|x| *x != T::zero())
                    {
                        return Err(Error::Validation(format!(
                            "k/v pad region not zero at (z={zz}, l={l})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn z(&self) -> usize {
        self.q.dims()[0]
    }

    pub fn l_q(&self) -> usize {
        self.q.dims()[1]
    }

    pub fn l_k(&self) -> usize {
        self.k.dims()[1]
    }

    pub fn heads(&self) -> usize {
        self.q.dims()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.q.dims()[3]
    }

    pub fn convert<U: Real>(&self) -> JaggedBatch<U> {
        JaggedBatch {
            q: self.q.convert(),
            k: self.k.convert(),
            v: self.v.convert(),
            n_q: self.n_q.clone(),
            n_k: self.n_k.clone(),
        }
    }

    /// Overwrite every pad-region Q/K/V entry with `value`. Breaks the
    /// zero-fill convention on purpose; used to prove pad independence.
    pub fn poison_padding(&mut self, value: T) {
        let [z, l_q, h, _d] = self.q.dims();
        let l_k = self.k.dims()[1];
        for zz in 0..z {
            for l in self.n_q[zz]..l_q {
                for hh in 0..h {
                    self.q.row_mut(zz, l, hh).fill(value);
                }
            }
            for l in self.n_k[zz]..l_k {
                for hh in 0..h {
                    self.k.row_mut(zz, l, hh).fill(value);
                    self.v.row_mut(zz, l, hh).fill(value);
                }
            }
        }
    }

    /// Check that every valid-region entry is finite; names the first
    /// offending coordinate. Pad entries are exempt.
    pub fn validate_finite(&self) -> Result<()> {
        let [z, _l_q, h, d] = self.q.dims();
        for zz in 0..z {
            for (name, tensor, len) in [
                ("q", &self.q, self.n_q[zz]),
                ("k", &self.k, self.n_k[zz]),
                ("v", &self.v, self.n_k[zz]),
            ] {
                for l in 0..len {
                    for hh in 0..h {
                        let row = tensor.row(zz, l, hh);
                        for dd in 0..d {
                            if !row[dd].as_f64().is_finite() {
                                return Err(Error::Validation(format!(
                                    "non-finite value in {name} at (z={zz}, l={l}, h={hh}, d={dd})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Family of synthetic sequence-length distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum LengthDistribution {
    /// Every sequence has the same length.
    Fixed { len: usize },
    /// Uniform over `[min_len, max_len]`.
    Uniform,
    /// `exp(N(mu, sigma^2))`, rounded, then clamped to `[min_len, max_len]`.
    /// The default: right-skewed, like real per-cell token counts.
    LogNormal { mu: f64, sigma: f64 },
}

/// Specification for sampling sequence lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDistributionSpec {
    pub distribution: LengthDistribution,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed used by [`sample_lengths`]; `generate_batch` derives its own
    /// streams from its explicit seed argument instead.
    pub seed: u64,
}

impl LengthDistributionSpec {
    pub fn fixed(len: usize) -> Self {
        Self {
            distribution: LengthDistribution::Fixed { len },
            min_len: len,
            max_len: len,
            seed: 0,
        }
    }

    pub fn log_normal(mu: f64, sigma: f64, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            distribution: LengthDistribution::LogNormal { mu, sigma },
            min_len,
            max_len,
            seed,
        }
    }

    pub fn uniform(min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            distribution: LengthDistribution::Uniform,
            min_len,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Parameter(format!(
                "length bounds must satisfy 1 <= min_len <= max_len (got {}..{})",
                self.min_len, self.max_len
            )));
        }
        if let LengthDistribution::LogNormal { sigma, .. } = self.distribution {
            if sigma < 0.0 || !sigma.is_finite() {
                return Err(Error::Parameter(format!("sigma must be finite and >= 0 (got {sigma})")));
            }
        }
        Ok(())
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> usize {
        let raw = match self.distribution {
            LengthDistribution::Fixed { len } => len,
            LengthDistribution::Uniform => rng.random_range(self.min_len..=self.max_len),
            LengthDistribution::LogNormal { mu, sigma } => {
                if sigma == 0.0 {
                    mu.exp().round() as usize
                } else {
                    let dist = LogNormal::new(mu, sigma).expect("validated sigma");
                    dist.sample(rng).round() as usize
                }
            }
        };
        raw.clamp(self.min_len, self.max_len)
    }
}

/// Draw `count` lengths using the spec's own seed.
pub fn sample_lengths(spec: &LengthDistributionSpec, count: usize) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..count).map(|_| spec.sample_one(&mut rng)).collect())
}

/// Generate a reproducible batch: lengths from `spec` (clamped to `L`),
/// valid-region entries i.i.d. standard normal, pad region zero.
///
/// `n_q = n_k` (symmetric lengths). All randomness derives from `seed`;
/// `spec.seed` is ignored here.
pub fn generate_batch<T: Real>(
    spec: &LengthDistributionSpec,
    z: usize,
    l: usize,
    h: usize,
    d: usize,
    seed: u64,
) -> Result<JaggedBatch<T>> {
    spec.validate()?;
    if z == 0 || l == 0 || h == 0 || d == 0 {
        return Err(Error::Dimension(format!(
            "all of Z, L, H, D must be >= 1 (got Z={z}, L={l}, H={h}, D={d})"
        )));
    }
    let mut len_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch/lengths"));
    let lengths: Vec<usize> = (0..z)
        .map(|_| spec.sample_one(&mut len_rng).min(l))
        .collect();
    generate_batch_with_lengths(&lengths, l, h, d, seed)
}

/// As [`generate_batch`] but with explicit per-sequence valid lengths.
pub fn generate_batch_with_lengths<T: Real>(
    lengths: &[usize],
    l: usize,
    h: usize,
    d: usize,
    seed: u64,
) -> Result<JaggedBatch<T>> {
    let z = lengths.len();
    if z == 0 {
        return Err(Error::EmptyInput("lengths must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch/values"));
    let mut fill = |tensor: &mut Tensor4<T>, valid: &[usize]| {
        for zz in 0..z {
            for pos in 0..valid[zz] {
                for hh in 0..h {
                    let row = tensor.row_mut(zz, pos, hh);
                    for slot in row.iter_mut() {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        *slot = T::from_f64(x);
                    }
                }
            }
        }
    };
    let mut q = Tensor4::zeros([z, l, h, d]);
    let mut k = Tensor4::zeros([z, l, h, d]);
    let mut v = Tensor4::zeros([z, l, h, d]);
    fill(&mut q, lengths);
    fill(&mut k, lengths);
    fill(&mut v, lengths);
    JaggedBatch::new(q, k, v, lengths.to_vec(), lengths.to_vec())
}

/// For each threshold `t`, the fraction of lengths `<= t`.
pub fn coverage_at_thresholds(lengths: &[usize], thresholds: &[usize]) -> Result<Vec<f64>> {
    if lengths.is_empty() {
        return Err(Error::EmptyInput("coverage needs at least one length".into()));
    }
    let n = lengths.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| lengths.iter().filter(|&&len| len <= t).count() as f64 / n)
        .collect())
}

/// Fraction of the padded Q area that is padding: `1 - sum(n_q) / (Z * L_q)`.
pub fn padding_fraction<T: Real>(batch: &JaggedBatch<T>) -> f64 {
    let total = (batch.z() * batch.l_q()) as f64;
    let valid: usize = batch.n_q.iter().sum();
    1.0 - valid as f64 / total
}

const HEADER_WORDS: usize = 5;

/// Write the batch fixture container: little-endian `Z, L_q, L_k, H, D` as
/// u64, then `n_q`, `n_k` as u64, then the raw q, k, v data as f32.
pub fn write_container<T: Real, W: Write>(batch: &JaggedBatch<T>, mut out: W) -> Result<()> {
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    for value in [z, l_q, l_k, h, d] {
        out.write_all(&(value as u64).to_le_bytes())?;
    }
    for lens in [&batch.n_q, &batch.n_k] {
        for &n in lens {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
    }
    for tensor in [&batch.q, &batch.k, &batch.v] {
        for value in tensor.data() {
            out.write_all(&(value.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_container<T: Real>(batch: &JaggedBatch<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_container(batch, std::io::BufWriter::new(file))
}

/// Read a batch fixture container written by [`write_container`].
pub fn read_container<R: Read>(mut input: R) -> Result<JaggedBatch<f32>> {
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |input: &mut R| -> Result<u64> {
        input.read_exact(&mut u64_buf)?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let mut header = [0usize; HEADER_WORDS];
    for slot in header.iter_mut() {
        let raw = read_u64(&mut input)?;
        *slot = usize::try_from(raw)
            .map_err(|_| Error::Format(format!("header value {raw} exceeds usize")))?;
    }
    let [z, l_q, l_k, h, d] = header;
    if z == 0 || l_q == 0 || l_k == 0 || h == 0 || d == 0 {
        return Err(Error::Format(format!("degenerate container header {header:?}")));
    }
    let mut read_lens = |input: &mut R| -> Result<Vec<usize>> {
        (0..z)
            .map(|_| {
                let raw = read_u64(input)?;
                usize::try_from(raw)
                    .map_err(|_| Error::Format(format!("length {raw} exceeds usize")))
            })
            .collect()
    };
    let n_q = read_lens(&mut input)?;
    let n_k = read_lens(&mut input)?;
    let read_tensor = |input: &mut R, dims: [usize; 4]| -> Result<Tensor4<f32>> {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f32_buf = [0u8; 4];
        for _ in 0..len {
            input.read_exact(&mut f32_buf)?;
            data.push(f32::from_le_bytes(f32_buf));
        }
        Tensor4::from_vec(dims, data)
    };
    let q = read_tensor(&mut input, [z, l_q, h, d])?;
    let k = read_tensor(&mut input, [z, l_k, h, d])?;
    let v = read_tensor(&mut input, [z, l_k, h, d])?;
    JaggedBatch::from_parts(q, k, v, n_q, n_k)
}

pub fn load_container(path: &Path) -> Result<JaggedBatch<f32>> {
    let file = std::fs::File::open(path)?;
    read_container(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_length_batch_has_no_padding() {
        let spec = LengthDistributionSpec::fixed(4);
        let batch: JaggedBatch<f64> = generate_batch(&spec, 2, 4, 1, 3, 7).unwrap();
        assert_eq!(batch.n_q, vec![4, 4]);
        assert_eq!(padding_fraction(&batch), 0.0);
    }

    #[test]
    fn short_sequence_pads_with_zeros() {
        let spec = LengthDistributionSpec::fixed(3);
        let batch: JaggedBatch<f64> = generate_batch(&spec, 1, 4, 1, 2, 7).unwrap();
        assert_eq!(batch.n_q, vec![3]);
        assert_eq!(batch.q.row(0, 3, 0), &[0.0, 0.0]);
        assert_eq!(batch.k.row(0, 3, 0), &[0.0, 0.0]);
        assert_eq!(batch.v.row(0, 3, 0), &[0.0, 0.0]);
    }

    #[test]
    fn log_normal_lengths_respect_clamp_bounds() {
        let spec = LengthDistributionSpec::log_normal(7.0, 0.6, 64, 8192, 11);
        let lengths = sample_lengths(&spec, 1000).unwrap();
        assert_eq!(lengths.len(), 1000);
        assert!(lengths.iter().all(|&l| (64..=8192).contains(&l)));
        // Right-skew sanity: some spread should exist.
        let min = lengths.iter().min().unwrap();
        let max = lengths.iter().max().unwrap();
        assert!(min < max);
    }

    #[test]
    fn generate_batch_is_bitwise_reproducible() {
        let spec = LengthDistributionSpec::log_normal(3.0, 0.5, 2, 16, 0);
        let a: JaggedBatch<f32> = generate_batch(&spec, 3, 16, 2, 4, 99).unwrap();
        let b: JaggedBatch<f32> = generate_batch(&spec, 3, 16, 2, 4, 99).unwrap();
        assert_eq!(a, b);
        let c: JaggedBatch<f32> = generate_batch(&spec, 3, 16, 2, 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        let spec = LengthDistributionSpec::fixed(4);
        assert!(matches!(
            generate_batch::<f64>(&spec, 0, 4, 1, 1, 0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            generate_batch::<f64>(&spec, 1, 4, 1, 0, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn coverage_direct_counts() {
        assert_eq!(
            coverage_at_thresholds(&[1, 2, 3, 4], &[2]).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            coverage_at_thresholds(&[5, 5, 5], &[4, 5, 6]).unwrap(),
            vec![0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn coverage_rejects_empty_input() {
        assert!(matches!(
            coverage_at_thresholds(&[], &[1]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn coverage_matches_brute_force_and_is_monotone() {
        let spec = LengthDistributionSpec::log_normal(7.0, 0.8, 32, 20000, 5);
        let lengths = sample_lengths(&spec, 10_000).unwrap();
        let thresholds = [2048usize, 4096, 8192, 16384];
        let cov = coverage_at_thresholds(&lengths, &thresholds).unwrap();
        // Independent brute-force count.
        for (i, &t) in thresholds.iter().enumerate() {
            let mut count = 0usize;
            for &l in &lengths {
                if l <= t {
                    count += 1;
                }
            }
            assert_eq!(cov[i], count as f64 / lengths.len() as f64);
        }
        for w in cov.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(cov.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn padding_fraction_hand_counts() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[3], 4, 1, 2, 0).unwrap();
        assert_eq!(padding_fraction(&batch), 0.25);
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[2, 4, 6, 8], 8, 1, 2, 0).unwrap();
        // 20 valid of 32 slots.
        assert_eq!(padding_fraction(&batch), 0.375);
    }

    #[test]
    fn container_round_trips_bitwise() {
        let spec = LengthDistributionSpec::log_normal(2.0, 0.7, 1, 12, 3);
        let batch: JaggedBatch<f32> = generate_batch(&spec, 3, 12, 2, 5, 21).unwrap();
        let mut bytes = Vec::new();
        write_container(&batch, &mut bytes).unwrap();
        // Header spot-check: Z then L_q as little-endian u64.
        assert_eq!(&bytes[0..8], &3u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &12u64.to_le_bytes());
        let restored = read_container(bytes.as_slice()).unwrap();
        assert_eq!(batch, restored);
    }

    #[test]
    fn container_rejects_truncated_input() {
        let spec = LengthDistributionSpec::fixed(2);
        let batch: JaggedBatch<f32> = generate_batch(&spec, 1, 2, 1, 2, 0).unwrap();
        let mut bytes = Vec::new();
        write_container(&batch, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_container(bytes.as_slice()).is_err());
    }

    #[test]
    fn validate_finite_names_the_bad_coordinate() {
        let mut batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[3], 4, 1, 2, 0).unwrap();
        batch.validate_finite().unwrap();
        // NaN in the pad region is exempt.
        batch.poison_padding(f64::NAN);
        batch.validate_finite().unwrap();
        *batch.q.at_mut(0, 1, 0, 1) = f64::NAN;
        let err = batch.validate_finite().unwrap_err();
        assert!(err.to_string().contains("l=1"), "got: {err}");
    }
}
