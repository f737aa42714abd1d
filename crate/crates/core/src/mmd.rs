//! Maximum mean discrepancy between embedding sets.
//!
//! RBF kernel `exp(-|x - y|^2 / (2 sigma^2))` with the bandwidth chosen by
//! the median heuristic over the pooled sample. `MMD^2(A, B) =
//! E[k(x, x')] - 2 E[k(x, y)] + E[k(y, y')]`, estimated either as the biased
//! V-statistic (diagonal included, always >= 0) or the unbiased U-statistic
//! (diagonal excluded, may dip below zero). Uncertainty comes from bootstrap
//! resampling with a percentile interval; the bandwidth is computed once on
//! the original pooled data and frozen across resamples, so the interval
//! reflects sampling variation only.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Labeled set of embedding points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `[N][d_embed]` points.
    pub points: Vec<Vec<f64>>,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(points: Vec<Vec<f64>>, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if points.is_empty() {
            return Err(Error::EmptyInput(format!("embedding set '{label}' is empty")));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Dimension(format!("embedding set '{label}' has 0-dim points")));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Dimension(format!(
                    "point {i} of '{label}' has dim {} (expected {dim})",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite coordinate in point {i} of '{label}'"
                )));
            }
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// V-statistic: diagonal terms included, always >= 0.
    Biased,
    /// U-statistic: diagonal excluded, unbiased, may be slightly negative.
    Unbiased,
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// RBF kernel value, in (0, 1].
pub fn rbf_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Parameter(format!(
            "bandwidth must be finite and > 0 (got {bandwidth})"
        )));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "kernel arguments have dims {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok((-squared_distance(x, y) / (2.0 * bandwidth * bandwidth)).exp())
}

/// Median-heuristic bandwidth with its degenerate-data flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub value: f64,
    /// Set when all points coincide (median distance 0) and the bandwidth
    /// fell back to 1.
    pub fallback: bool,
}

/// Pairs examined exactly up to this many points; beyond it a fixed-seed
/// uniform subsample of 1e6 pairs stands in.
const MEDIAN_EXACT_LIMIT: usize = 2000;
const MEDIAN_SUBSAMPLE_PAIRS: usize = 1_000_000;
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6d65_6469_616e;

/// Median of pairwise Euclidean distances over the pooled points.
pub fn median_heuristic(pooled: &[&[f64]]) -> Result<Bandwidth> {
    if pooled.len() < 2 {
        return Err(Error::EmptyInput(
            "median heuristic needs at least 2 points".into(),
        ));
    }
    let n = pooled.len();
    let mut distances: Vec<f64> = if n <= MEDIAN_EXACT_LIMIT {
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                d.push(squared_distance(pooled[i], pooled[j]).sqrt());
            }
        }
        d
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        (0..MEDIAN_SUBSAMPLE_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                squared_distance(pooled[i], pooled[j]).sqrt()
            })
            .collect()
    };
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = distances.len();
    let median = if m % 2 == 1 {
        distances[m / 2]
    } else {
        0.5 * (distances[m / 2 - 1] + distances[m / 2])
    };
    if median == 0.0 {
        return Ok(Bandwidth {
            value: 1.0,
            fallback: true,
        });
    }
    Ok(Bandwidth {
        value: median,
        fallback: false,
    })
}

/// Convenience: pooled median over two sets.
pub fn pooled_bandwidth(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Bandwidth> {
    let pooled: Vec<&[f64]> = a
        .points
        .iter()
        .chain(b.points.iter())
        .map(|p| p.as_slice())
        .collect();
    median_heuristic(&pooled)
}

struct Gram {
    aa: Vec<f64>,
    ab: Vec<f64>,
    bb: Vec<f64>,
    n: usize,
    m: usize,
}

fn gram(a: &EmbeddingSet, b: &EmbeddingSet, bandwidth: f64) -> Result<Gram> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "sets '{}' and '{}' have dims {} and {}",
            a.label,
            b.label,
            a.dim(),
            b.dim()
        )));
    }
    let (n, m) = (a.len(), b.len());
    let mut g = Gram {
        aa: vec![0.0; n * n],
        ab: vec![0.0; n * m],
        bb: vec![0.0; m * m],
        n,
        m,
    };
    for i in 0..n {
        for j in 0..n {
            g.aa[i * n + j] = rbf_kernel(&a.points[i], &a.points[j], bandwidth)?;
        }
    }
    for i in 0..n {
        for j in 0..m {
            g.ab[i * m + j] = rbf_kernel(&a.points[i], &b.points[j], bandwidth)?;
        }
    }
    for i in 0..m {
        for j in 0..m {
            g.bb[i * m + j] = rbf_kernel(&b.points[i], &b.points[j], bandwidth)?;
        }
    }
    Ok(g)
}

fn mmd2_from_gram(
    g: &Gram,
    idx_a: &[usize],
    idx_b: &[usize],
    estimator: Estimator,
) -> Result<f64> {
    let (n, m) = (idx_a.len(), idx_b.len());
    let mut t_aa = 0.0;
    for &i in idx_a {
        for &j in idx_a {
            t_aa += g.aa[i * g.n + j];
        }
    }
    let mut t_ab = 0.0;
    for &i in idx_a {
        for &j in idx_b {
            t_ab += g.ab[i * g.m + j];
        }
    }
    let mut t_bb = 0.0;
    for &i in idx_b {
        for &j in idx_b {
            t_bb += g.bb[i * g.m + j];
        }
    }
    match estimator {
        Estimator::Biased => {
            let value = t_aa / (n * n) as f64 - 2.0 * t_ab / (n * m) as f64
                + t_bb / (m * m) as f64;
            // The V-statistic is a squared RKHS norm; clamp away the tiny
            // negative values floating summation can produce.
            Ok(value.max(0.0))
        }
        Estimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(Error::Estimator(
                    "unbiased estimator needs at least 2 points per set".into(),
                ));
            }
            // Remove diagonal contributions (k(x, x) = 1 for RBF).
            let diag_a: f64 = idx_a.iter().map(|&i| g.aa[i * g.n + i]).sum();
            let diag_b: f64 = idx_b.iter().map(|&i| g.bb[i * g.m + i]).sum();
            Ok((t_aa - diag_a) / (n * (n - 1)) as f64 - 2.0 * t_ab / (n * m) as f64
                + (t_bb - diag_b) / (m * (m - 1)) as f64)
        }
    }
}

/// Squared MMD between two sets at a fixed bandwidth.
pub fn mmd2(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    estimator: Estimator,
    bandwidth: f64,
) -> Result<f64> {
    let g = gram(a, b, bandwidth)?;
    let idx_a: Vec<usize> = (0..a.len()).collect();
    let idx_b: Vec<usize> = (0..b.len()).collect();
    mmd2_from_gram(&g, &idx_a, &idx_b, estimator)
}

/// Bootstrap MMD estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Mean of the bootstrap samples.
    pub point_estimate: f64,
    pub bootstrap_samples: Vec<f64>,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub bandwidth: f64,
    pub bandwidth_fallback: bool,
}

impl MmdResult {
    /// `sqrt(max(mmd2, 0))`, the distance-scaled statistic.
    pub fn mmd(&self) -> f64 {
        self.point_estimate.max(0.0).sqrt()
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let r = sorted.len();
    let rank = ((q * r as f64).ceil() as usize).clamp(1, r);
    sorted[rank - 1]
}

/// Bootstrap the MMD^2 estimator: each resample redraws both sets with
/// replacement and re-evaluates at the original pooled-median bandwidth.
/// The point estimate is the bootstrap mean, the interval the percentile
/// interval. Deterministic for a fixed seed under any parallel schedule
/// (each resample derives its own RNG stream).
pub fn bootstrap_mmd(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    resamples: usize,
    ci: f64,
    estimator: Estimator,
    seed: u64,
) -> Result<MmdResult> {
    if resamples < 2 {
        return Err(Error::Parameter("bootstrap needs at least 2 resamples".into()));
    }
    if !(ci > 0.0 && ci < 1.0) {
        return Err(Error::Parameter(format!("ci must lie in (0, 1) (got {ci})")));
    }
    let bandwidth = pooled_bandwidth(a, b)?;
    let g = gram(a, b, bandwidth.value)?;
    let (n, m) = (a.len(), b.len());

    use rayon::prelude::*;
    let samples: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("mmd/resample/{r}")));
            let idx_a: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let idx_b: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            mmd2_from_gram(&g, &idx_a, &idx_b, estimator)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut sorted = samples.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let lo_q = (1.0 - ci) / 2.0;
    let result = MmdResult {
        point_estimate: samples.iter().sum::<f64>() / samples.len() as f64,
        ci_lower: percentile(&sorted, lo_q),
        ci_upper: percentile(&sorted, 1.0 - lo_q),
        bootstrap_samples: samples,
        bandwidth: bandwidth.value,
        bandwidth_fallback: bandwidth.fallback,
    };
    Ok(result)
}

/// One row of the pairwise comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: String,
    /// Bootstrap-mean MMD^2.
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub bandwidth: f64,
    /// sqrt(max(estimate, 0)) and the matching interval endpoints, since
    /// either convention may be wanted downstream.
    pub mmd: f64,
    pub mmd_lower: f64,
    pub mmd_upper: f64,
}

/// Bootstrap every unordered label pair.
pub fn pairwise_mmd_table(
    sets: &[EmbeddingSet],
    resamples: usize,
    ci: f64,
    estimator: Estimator,
    seed: u64,
) -> Result<Vec<PairRow>> {
    if sets.len() < 2 {
        return Err(Error::Parameter(
            "pairwise table needs at least 2 labeled sets".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sets.len() * (sets.len() - 1) / 2);
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let pair_seed = derive_seed(seed, &format!("mmd/pair/{}/{}", sets[i].label, sets[j].label));
            let result = bootstrap_mmd(&sets[i], &sets[j], resamples, ci, estimator, pair_seed)?;
            rows.push(PairRow {
                pair: format!("{} vs {}", sets[i].label, sets[j].label),
                estimate: result.point_estimate,
                ci_lower: result.ci_lower,
                ci_upper: result.ci_upper,
                bandwidth: result.bandwidth,
                mmd: result.point_estimate.max(0.0).sqrt(),
                mmd_lower: result.ci_lower.max(0.0).sqrt(),
                mmd_upper: result.ci_upper.max(0.0).sqrt(),
            });
        }
    }
    Ok(rows)
}

pub const MMD_CSV_HEADER: &str = "pair,estimate,ci_lower,ci_upper,bandwidth,mmd,mmd_lower,mmd_upper";

pub fn mmd_table_to_csv(rows: &[PairRow]) -> String {
    let mut out = String::from(MMD_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.pair, r.estimate, r.ci_lower, r.ci_upper, r.bandwidth, r.mmd, r.mmd_lower, r.mmd_upper
        ));
    }
    out
}

/// Load labeled embeddings from CSV: one row per point, one label column
/// (by name), every other column numeric. Returns one set per label in
/// first-appearance order.
pub fn load_embeddings_csv(path: &Path, label_column: &str) -> Result<Vec<EmbeddingSet>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("bad CSV header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Format(format!(
                "no '{label_column}' column in {} (columns: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<Vec<f64>>> =
        std::collections::HashMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("row {row_idx}: {e}")))?;
        let label = record
            .get(label_idx)
            .ok_or_else(|| Error::Format(format!("row {row_idx}: missing label")))?
            .to_string();
        let mut point = Vec::with_capacity(record.len() - 1);
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let value: f64 = field.parse().map_err(|_| {
                Error::Format(format!(
                    "row {row_idx}, column {col}: '{field}' is not a number"
                ))
            })?;
            point.push(value);
        }
        if !grouped.contains_key(&label) {
            order.push(label.clone());
        }
        grouped.entry(label).or_default().push(point);
    }
    order
        .into_iter()
        .map(|label| {
            let points = grouped.remove(&label).expect("grouped by construction");
            EmbeddingSet::new(points, label)
        })
        .collect()
}

/// Synthetic labeled Gaussian mixture: `labels` clusters of `per_label`
/// points in `dim` dimensions, cluster centers `spread` apart.
pub fn labeled_gaussians(
    labels: usize,
    per_label: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<EmbeddingSet>> {
    if labels == 0 || per_label == 0 || dim == 0 {
        return Err(Error::Parameter("labels, per_label, dim must all be >= 1".into()));
    }
    use rand_distr::{Distribution, StandardNormal};
    let mut sets = Vec::with_capacity(labels);
    for label_idx in 0..labels {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("mmd/synthetic/{label_idx}")));
        let mut center = vec![0.0; dim];
        for slot in center.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *slot = x * spread;
        }
        let points: Vec<Vec<f64>> = (0..per_label)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        c + x
                    })
                    .collect()
            })
            .collect();
        sets.push(EmbeddingSet::new(points, format!("cluster{label_idx}"))?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_set(label: &str, n: usize, dim: usize, shift: f64, seed: u64) -> EmbeddingSet {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|c| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x + if c == 0 { shift } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        EmbeddingSet::new(points, label).unwrap()
    }

    #[test]
    fn rbf_kernel_anchors() {
        let x = vec![1.0, 2.0];
        assert_eq!(rbf_kernel(&x, &x, 0.5).unwrap(), 1.0);
        // |x - y| = bandwidth gives exp(-1/2).
        let y = vec![1.0, 2.7];
        let k = rbf_kernel(&x, &y, 0.7).unwrap();
        assert!((k - (-0.5f64).exp()).abs() <= 1e-12);
        // Symmetric bitwise.
        assert_eq!(
            rbf_kernel(&x, &y, 0.7).unwrap(),
            rbf_kernel(&y, &x, 0.7).unwrap()
        );
        assert!(rbf_kernel(&x, &y, 0.0).is_err());
        assert!(rbf_kernel(&x, &[1.0], 1.0).is_err());
    }

    #[test]
    fn median_heuristic_hand_case_and_fallback() {
        let points: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![2.0]];
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        // Pair distances {1, 1, 2}: median 1.
        let bw = median_heuristic(&refs).unwrap();
        assert_eq!(bw.value, 1.0);
        assert!(!bw.fallback);
        let same: Vec<Vec<f64>> = vec![vec![3.0, 3.0]; 4];
        let refs: Vec<&[f64]> = same.iter().map(|p| p.as_slice()).collect();
        let bw = median_heuristic(&refs).unwrap();
        assert_eq!(bw.value, 1.0);
        assert!(bw.fallback);
        assert!(median_heuristic(&refs[..1]).is_err());
    }

    #[test]
    fn biased_mmd2_of_identical_sets_is_exactly_zero() {
        let a = gaussian_set("a", 24, 3, 0.0, 5);
        let b = a.clone();
        assert_eq!(mmd2(&a, &b, Estimator::Biased, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn singleton_biased_mmd2_matches_hand_expansion() {
        let a = EmbeddingSet::new(vec![vec![0.0, 0.0]], "a").unwrap();
        let b = EmbeddingSet::new(vec![vec![1.0, 1.0]], "b").unwrap();
        let bw = 0.9;
        let k = rbf_kernel(&a.points[0], &b.points[0], bw).unwrap();
        let value = mmd2(&a, &b, Estimator::Biased, bw).unwrap();
        assert!((value - 2.0 * (1.0 - k)).abs() <= 1e-15);
    }

    #[test]
    fn mmd2_matches_triple_loop_oracle() {
        let a = gaussian_set("a", 15, 4, 0.0, 11);
        let b = gaussian_set("b", 18, 4, 1.0, 13);
        let bw = pooled_bandwidth(&a, &b).unwrap().value;
        for estimator in [Estimator::Biased, Estimator::Unbiased] {
            let fast = mmd2(&a, &b, estimator, bw).unwrap();
            // Direct evaluation of the three expectation terms.
            let (n, m) = (a.len() as f64, b.len() as f64);
            let mut t_aa = 0.0;
            let mut c_aa = 0.0;
            for (i, x) in a.points.iter().enumerate() {
                for (j, y) in a.points.iter().enumerate() {
                    if estimator == Estimator::Unbiased && i == j {
                        continue;
                    }
                    t_aa += rbf_kernel(x, y, bw).unwrap();
                    c_aa += 1.0;
                }
            }
            let mut t_ab = 0.0;
            for x in &a.points {
                for y in &b.points {
                    t_ab += rbf_kernel(x, y, bw).unwrap();
                }
            }
            let mut t_bb = 0.0;
            let mut c_bb = 0.0;
            for (i, x) in b.points.iter().enumerate() {
                for (j, y) in b.points.iter().enumerate() {
                    if estimator == Estimator::Unbiased && i == j {
                        continue;
                    }
                    t_bb += rbf_kernel(x, y, bw).unwrap();
                    c_bb += 1.0;
                }
            }
            let expected = t_aa / c_aa - 2.0 * t_ab / (n * m) + t_bb / c_bb;
            assert!(
                (fast - expected).abs() <= 1e-12,
                "{estimator:?}: {fast} vs {expected}"
            );
        }
    }

    #[test]
    fn mmd2_is_symmetric_and_separates_directionally() {
        let a = gaussian_set("a", 40, 4, 0.0, 17);
        let b = gaussian_set("b", 40, 4, 3.0, 19);
        let c = gaussian_set("c", 40, 4, 0.0, 23);
        let bw = pooled_bandwidth(&a, &b).unwrap().value;
        let ab = mmd2(&a, &b, Estimator::Biased, bw).unwrap();
        let ba = mmd2(&b, &a, Estimator::Biased, bw).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        let bw_null = pooled_bandwidth(&a, &c).unwrap().value;
        let ac = mmd2(&a, &c, Estimator::Biased, bw_null).unwrap();
        assert!(ab > 10.0 * ac, "separated {ab} vs null {ac}");
    }

    #[test]
    fn unbiased_estimator_needs_two_points() {
        let a = EmbeddingSet::new(vec![vec![0.0]], "a").unwrap();
        let b = EmbeddingSet::new(vec![vec![1.0]], "b").unwrap();
        assert!(matches!(
            mmd2(&a, &b, Estimator::Unbiased, 1.0),
            Err(Error::Estimator(_))
        ));
    }

    #[test]
    fn joint_rescaling_leaves_mmd2_invariant() {
        let a = gaussian_set("a", 25, 3, 0.0, 29);
        let b = gaussian_set("b", 30, 3, 1.5, 31);
        let bw = pooled_bandwidth(&a, &b).unwrap();
        let base = mmd2(&a, &b, Estimator::Biased, bw.value).unwrap();
        for c in [0.1, 7.0, 1234.5] {
            let scale = |s: &EmbeddingSet| {
                EmbeddingSet::new(
                    s.points
                        .iter()
                        .map(|p| p.iter().map(|v| v * c).collect())
                        .collect(),
                    s.label.clone(),
                )
                .unwrap()
            };
            let (sa, sb) = (scale(&a), scale(&b));
            let sbw = pooled_bandwidth(&sa, &sb).unwrap();
            // Bandwidth scales with the data.
            assert!((sbw.value - c * bw.value).abs() <= 1e-9 * c * bw.value);
            let scaled = mmd2(&sa, &sb, Estimator::Biased, sbw.value).unwrap();
            assert!(
                (scaled - base).abs() <= 1e-9 * base.max(1e-12),
                "c={c}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_detects_separation() {
        let a = gaussian_set("a", 30, 4, 0.0, 37);
        let b = gaussian_set("b", 30, 4, 3.0, 41);
        let r1 = bootstrap_mmd(&a, &b, 200, 0.95, Estimator::Biased, 7).unwrap();
        let r2 = bootstrap_mmd(&a, &b, 200, 0.95, Estimator::Biased, 7).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.ci_lower > 0.0, "separation must be detected");
        assert!(r1.ci_lower <= r1.ci_upper);
        // Percentile interval contains the bootstrap median.
        let mut sorted = r1.bootstrap_samples.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = sorted[sorted.len() / 2];
        assert!(r1.ci_lower <= median && median <= r1.ci_upper);
        // Identical sets: biased estimate stays small and non-negative.
        let same = bootstrap_mmd(&a, &a.clone(), 100, 0.95, Estimator::Biased, 9).unwrap();
        assert!(same.point_estimate >= 0.0);
        assert!(same.ci_lower >= 0.0);
        assert!(same.point_estimate < 0.05);
    }

    #[test]
    fn pairwise_table_covers_all_pairs() {
        let sets = labeled_gaussians(3, 12, 3, 4.0, 3).unwrap();
        let rows = pairwise_mmd_table(&sets, 50, 0.95, Estimator::Biased, 11).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].pair, "cluster0 vs cluster1");
        let csv = mmd_table_to_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), MMD_CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
        assert!(pairwise_mmd_table(&sets[..1], 50, 0.95, Estimator::Biased, 11).is_err());
    }

    #[test]
    fn csv_loader_groups_by_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.csv");
        std::fs::write(
            &path,
            "x0,x1,label\n0.5,1.5,alpha\n0.25,-1.0,beta\n1.5,2.5,alpha\n",
        )
        .unwrap();
        let sets = load_embeddings_csv(&path, "label").unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].label, "alpha");
        assert_eq!(sets[0].points, vec![vec![0.5, 1.5], vec![1.5, 2.5]]);
        assert_eq!(sets[1].points, vec![vec![0.25, -1.0]]);
        assert!(load_embeddings_csv(&path, "missing").is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn biased_mmd2_is_never_negative(seed in 0u64..500, n in 2usize..12, m in 2usize..12) {
            let a = gaussian_set("a", n, 2, 0.0, seed);
            let b = gaussian_set("b", m, 2, 0.3, seed.wrapping_add(1));
            let bw = pooled_bandwidth(&a, &b).unwrap().value;
            let v = mmd2(&a, &b, Estimator::Biased, bw).unwrap();
            proptest::prop_assert!(v >= 0.0);
        }
    }
}
