//! Padding-aware blocked sigmoid attention kernels.
//!
//! Three tiled kernels over `[Z, L, H, D]` batches:
//!
//! - forward: grid over (query block, Z*H), inner loop over key blocks;
//! - backward dQ: same grid, recomputes scores and weights per tile;
//! - backward dK/dV: grid over (key block, Z*H), inner loop over query
//!   blocks, so every work item owns a disjoint output slice and no
//!   accumulation crosses work items.
//!
//! Fully padded blocks are skipped (their output is written as zero), the
//! inner loops stop at the valid length, and partial tiles at the valid/pad
//! boundary are computed in full with masked lanes: masked scores are
//! overwritten with `-inf` before the sigmoid, so `sigma(-inf) = 0` and pad
//! contents can never reach an output. Scale, bias, mask, and sigmoid are
//! fused into one pass over each score tile.
//!
//! Compute is generic over `f32`/`f64`; cross-tile accumulation runs in the
//! configured accumulator precision, wider than (or equal to) compute. Tile
//! data is gathered once per tile into contiguous scratch buffers (the key
//! tile transposed for the score microkernel), replacing the transposed
//! global reads a GPU kernel would use.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::batch::JaggedBatch;
use crate::error::{Error, Result};
use crate::reference::{AttentionConfig, Mechanism};
use crate::tensor::{Real, Tensor4};

/// Sigmoid evaluation strategy inside the fused tile op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmoidMode {
    /// `1 / (1 + exp(-x))`, computed in the numerically stable split form.
    Exact,
    /// `0.5 * (tanh(x/2) + 1)`; identical analytically, mirrors the fast
    /// tanh primitive a GPU kernel would use.
    TanhApprox,
}

/// Precision of cross-tile accumulators relative to compute precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccumulatorPrecision {
    /// f64 accumulators (default): wider than f32 compute, same as f64.
    Double,
    /// Accumulate in the compute precision itself.
    Single,
}

/// Tile geometry and execution options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Query block size `B_M`.
    pub b_m: usize,
    /// Key block size `B_N`.
    pub b_n: usize,
    pub sigmoid_mode: SigmoidMode,
    pub accumulator_precision: AccumulatorPrecision,
    /// 1 = sequential. Larger values run grid items in parallel (the value
    /// is a hint; the global thread pool sizes the actual parallelism).
    /// Results are bitwise identical either way: work items own disjoint
    /// output rows and accumulate in a fixed order.
    pub worker_count: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            b_m: 64,
            b_n: 64,
            sigmoid_mode: SigmoidMode::Exact,
            accumulator_precision: AccumulatorPrecision::Double,
            worker_count: 1,
        }
    }
}

impl TileConfig {
    pub fn new(b_m: usize, b_n: usize) -> Self {
        Self {
            b_m,
            b_n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_m == 0 || self.b_n == 0 {
            return Err(Error::Parameter(format!(
                "block sizes must be >= 1 (got B_M={}, B_N={})",
                self.b_m, self.b_n
            )));
        }
        if self.worker_count == 0 {
            return Err(Error::Parameter("worker_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Block skip instrumentation.
///
/// The query counters always count query blocks and the key counters key
/// blocks. In the forward and dQ kernels the grid runs over query blocks and
/// key blocks are inner-loop visits; in the dK/dV kernel the roles are
/// mirrored (grid over key blocks, query blocks visited in the inner loop).
/// `total_*` counts the work a skip-free kernel would do; `skipped_*` counts
/// how much of it was avoided, so `skipped <= total` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub total_query_blocks: u64,
    pub skipped_query_blocks: u64,
    pub total_key_block_visits: u64,
    pub skipped_key_block_visits: u64,
}

impl KernelStats {
    pub fn merged(self, other: Self) -> Self {
        Self {
            total_query_blocks: self.total_query_blocks + other.total_query_blocks,
            skipped_query_blocks: self.skipped_query_blocks + other.skipped_query_blocks,
            total_key_block_visits: self.total_key_block_visits + other.total_key_block_visits,
            skipped_key_block_visits: self.skipped_key_block_visits
                + other.skipped_key_block_visits,
        }
    }
}

/// Element-wise sigmoid with the masking contract: both modes return exactly
/// 0 at the `-inf` sentinel.
#[inline(always)]
pub fn sigmoid_eval<T: Real>(x: T, mode: SigmoidMode) -> T {
    match mode {
        SigmoidMode::Exact => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                // exp(-inf) = 0, so sigma(-inf) = 0 / 1 = 0 exactly.
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        SigmoidMode::TanhApprox => {
            let half = T::from_f64(0.5);
            half * ((x * half).tanh() + T::one())
        }
    }
}

#[inline(always)]
fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

#[inline(always)]
fn dot<A: Real>(a: &[A], b: &[A]) -> A {
    let mut acc = A::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc = acc + *x * *y;
    }
    acc
}

/// Shared-output writer for the data-parallel grid.
///
/// Safety contract: every grid item writes a set of row indices disjoint
/// from every other item's (forward/dQ items own query rows of one
/// `(block, z, h)`; dK/dV items own key rows of one `(block, z, h)`), so
/// concurrent `write_row` calls never alias.
struct RowTable<'a, T> {
    ptr: *mut T,
    row_len: usize,
    rows: usize,
    _marker: PhantomData<&'a mut [T]>,
}

unsafe impl<T: Send> Send for RowTable<'_, T> {}
unsafe impl<T: Send> Sync for RowTable<'_, T> {}

impl<'a, T: Real> RowTable<'a, T> {
    fn new(data: &'a mut [T], row_len: usize) -> Self {
        debug_assert_eq!(data.len() % row_len, 0);
        Self {
            rows: data.len() / row_len,
            ptr: data.as_mut_ptr(),
            row_len,
            _marker: PhantomData,
        }
    }

    /// Write one row, narrowing from the accumulator type.
    ///
    /// Caller must hold the disjointness contract above for `row`.
    #[inline(always)]
    unsafe fn write_row<A: Real>(&self, row: usize, src: &[A]) {
        debug_assert!(row < self.rows);
        debug_assert_eq!(src.len(), self.row_len);
        let dst = std::slice::from_raw_parts_mut(self.ptr.add(row * self.row_len), self.row_len);
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d = T::from_f64(s.as_f64());
        }
    }

    #[inline(always)]
    unsafe fn zero_row(&self, row: usize) {
        debug_assert!(row < self.rows);
        let dst = std::slice::from_raw_parts_mut(self.ptr.add(row * self.row_len), self.row_len);
        dst.fill(T::zero());
    }
}

/// Run `work` over all grid items, sequentially or via the thread pool.
fn for_each_item<S, NewS, Work>(
    items: usize,
    workers: usize,
    new_scratch: NewS,
    work: Work,
) -> KernelStats
where
    S: Send,
    NewS: Fn() -> S + Send + Sync,
    Work: Fn(usize, &mut S) -> KernelStats + Send + Sync,
{
    if workers <= 1 || items <= 1 {
        let mut scratch = new_scratch();
        let mut stats = KernelStats::default();
        for idx in 0..items {
            stats = stats.merged(work(idx, &mut scratch));
        }
        stats
    } else {
        use rayon::prelude::*;
        (0..items)
            .into_par_iter()
            .map_init(&new_scratch, |scratch, idx| work(idx, scratch))
            .reduce(KernelStats::default, KernelStats::merged)
    }
}

fn validate_sigmoid_call<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
) -> Result<()> {
    cfg.validate()?;
    tiles.validate()?;
    if cfg.mechanism != Mechanism::Sigmoid {
        return Err(Error::Unsupported(
            "blocked kernels implement sigmoid attention only; use the dense reference for softmax"
                .into(),
        ));
    }
    let _ = batch;
    Ok(())
}

fn check_grad_shape<T: Real>(batch: &JaggedBatch<T>, grad: &Tensor4<T>, name: &str) -> Result<()> {
    if grad.dims() != batch.q.dims() {
        return Err(Error::Dimension(format!(
            "{name} dims {:?} do not match q dims {:?}",
            grad.dims(),
            batch.q.dims()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct FwdScratch<A> {
    q: Vec<A>,
    k_t: Vec<A>,
    v: Vec<A>,
    s: Vec<A>,
    acc: Vec<A>,
}

impl<A: Real> FwdScratch<A> {
    fn new(b_m: usize, b_n: usize, d: usize) -> Self {
        Self {
            q: vec![A::zero(); b_m * d],
            k_t: vec![A::zero(); d * b_n],
            v: vec![A::zero(); b_n * d],
            s: vec![A::zero(); b_m * b_n],
            acc: vec![A::zero(); b_m * d],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<T: Real, A: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    skip: bool,
    out: &mut Tensor4<T>,
) -> KernelStats {
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    let (b_m, b_n) = (tiles.b_m, tiles.b_n);
    let q_blocks = ceil_div(l_q, b_m);
    let key_blocks_full = ceil_div(l_k, b_n) as u64;
    let items = q_blocks * z * h;
    let alpha = A::from_f64(cfg.scale);

    let writer = RowTable::new(out.data_mut(), d);
    let worker_count = tiles.worker_count;
    let sigmoid_mode = tiles.sigmoid_mode;

    for_each_item(
        items,
        worker_count,
        || FwdScratch::<A>::new(b_m, b_n, d),
        |idx, scratch| {
            let m = idx % q_blocks;
            let zh = idx / q_blocks;
            let zz = zh / h;
            let hh = zh % h;
            let n_q = batch.n_q[zz];
            let n_k = batch.n_k[zz];
            let bias = A::from_f64(cfg.bias_for(n_k));

            let start_m = m * b_m;
            let end_m = (start_m + b_m).min(l_q);
            let rows = end_m - start_m;
            let row_index = |l: usize| (zz * l_q + l) * h + hh;

            let mut stats = KernelStats {
                total_query_blocks: 1,
                ..Default::default()
            };

            if skip && start_m >= n_q {
                // Fully padded query block: write zeros and move on.
                for i in 0..rows {
                    unsafe { writer.zero_row(row_index(start_m + i)) };
                }
                stats.skipped_query_blocks = 1;
                return stats;
            }

            let valid_m = n_q.saturating_sub(start_m).min(rows);
            for i in 0..rows {
                let src = batch.q.row(zz, start_m + i, hh);
                for dd in 0..d {
                    scratch.q[i * d + dd] = A::from_f64(src[dd].as_f64());
                }
            }
            scratch.acc[..rows * d].fill(A::zero());

            let key_limit = if skip { n_k } else { l_k };
            let mut visits = 0u64;
            let mut start_n = 0;
            while start_n < key_limit {
                visits += 1;
                let end_n = (start_n + b_n).min(l_k);
                let cols = end_n - start_n;
                let valid_n = n_k.saturating_sub(start_n).min(cols);

                // Gather the key tile transposed and the value tile
                // contiguous, once per tile.
                for j in 0..cols {
                    let k_src = batch.k.row(zz, start_n + j, hh);
                    let v_src = batch.v.row(zz, start_n + j, hh);
                    for dd in 0..d {
                        scratch.k_t[dd * cols + j] = A::from_f64(k_src[dd].as_f64());
                        scratch.v[j * d + dd] = A::from_f64(v_src[dd].as_f64());
                    }
                }

                // Score tile S = Q K^T over the full tile.
                scratch.s[..rows * cols].fill(A::zero());
                for i in 0..rows {
                    let q_row = &scratch.q[i * d..(i + 1) * d];
                    let s_row = &mut scratch.s[i * cols..(i + 1) * cols];
                    for (dd, &qv) in q_row.iter().enumerate() {
                        let k_row = &scratch.k_t[dd * cols..(dd + 1) * cols];
                        for (sj, &kv) in s_row.iter_mut().zip(k_row.iter()) {
                            *sj = *sj + qv * kv;
                        }
                    }
                }

                // Fused scale + bias + mask + sigmoid. Masked lanes are
                // overwritten with -inf (not added to), so arbitrary pad
                // contents — including NaN — can never leak through.
                for i in 0..rows {
                    let i_valid = i < valid_m;
                    let s_row = &mut scratch.s[i * cols..(i + 1) * cols];
                    for (j, sj) in s_row.iter_mut().enumerate() {
                        let x = if i_valid && j < valid_n {
                            *sj * alpha + bias
                        } else {
                            A::neg_infinity()
                        };
                        *sj = sigmoid_eval(x, sigmoid_mode);
                    }
                }

                // Accumulate P V over the valid prefix; masked lanes hold
                // weight 0 and contribute nothing.
                for i in 0..valid_m {
                    let p_row = &scratch.s[i * cols..(i + 1) * cols];
                    let acc_row = &mut scratch.acc[i * d..(i + 1) * d];
                    for (j, &p) in p_row.iter().enumerate().take(valid_n) {
                        let v_row = &scratch.v[j * d..(j + 1) * d];
                        for dd in 0..d {
                            acc_row[dd] = acc_row[dd] + p * v_row[dd];
                        }
                    }
                }

                start_n += b_n;
            }

            stats.total_key_block_visits = key_blocks_full;
            stats.skipped_key_block_visits = key_blocks_full - visits;

            for i in 0..rows {
                unsafe {
                    writer.write_row(row_index(start_m + i), &scratch.acc[i * d..(i + 1) * d])
                };
            }
            stats
        },
    )
}

fn forward_dispatch<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    skip: bool,
    out: &mut Tensor4<T>,
) -> Result<KernelStats> {
    validate_sigmoid_call(batch, cfg, tiles)?;
    if out.dims() != batch.q.dims() {
        return Err(Error::Dimension(format!(
            "output dims {:?} do not match q dims {:?}",
            out.dims(),
            batch.q.dims()
        )));
    }
    Ok(match tiles.accumulator_precision {
        AccumulatorPrecision::Double => forward_impl::<T, f64>(batch, cfg, tiles, skip, out),
        AccumulatorPrecision::Single => forward_impl::<T, T>(batch, cfg, tiles, skip, out),
    })
}

/// Tiled sigmoid-attention forward pass with padded-block skipping.
pub fn blocked_forward<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
) -> Result<(Tensor4<T>, KernelStats)> {
    let mut out = Tensor4::zeros(batch.q.dims());
    let stats = blocked_forward_into(batch, cfg, tiles, &mut out)?;
    Ok((out, stats))
}

/// Forward pass into a caller-provided output buffer (every row is
/// overwritten, so the buffer does not need to be cleared).
pub fn blocked_forward_into<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    out: &mut Tensor4<T>,
) -> Result<KernelStats> {
    forward_dispatch(batch, cfg, tiles, true, out)
}

/// Skip-free variant: visits every block (masked lanes still yield zero), so
/// outputs are bitwise identical to [`blocked_forward`]. Exists as the
/// baseline for measuring what block skipping saves.
pub fn blocked_forward_noskip<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
) -> Result<(Tensor4<T>, KernelStats)> {
    let mut out = Tensor4::zeros(batch.q.dims());
    let stats = blocked_forward_noskip_into(batch, cfg, tiles, &mut out)?;
    Ok((out, stats))
}

pub fn blocked_forward_noskip_into<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    out: &mut Tensor4<T>,
) -> Result<KernelStats> {
    forward_dispatch(batch, cfg, tiles, false, out)
}

// ---------------------------------------------------------------------------
// Backward dQ
// ---------------------------------------------------------------------------

struct DqScratch<A> {
    q: Vec<A>,
    d_out: Vec<A>,
    k: Vec<A>,
    v: Vec<A>,
    s: Vec<A>,
    acc: Vec<A>,
}

impl<A: Real> DqScratch<A> {
    fn new(b_m: usize, b_n: usize, d: usize) -> Self {
        Self {
            q: vec![A::zero(); b_m * d],
            d_out: vec![A::zero(); b_m * d],
            k: vec![A::zero(); b_n * d],
            v: vec![A::zero(); b_n * d],
            s: vec![A::zero(); b_m * b_n],
            acc: vec![A::zero(); b_m * d],
        }
    }
}

fn dq_impl<T: Real, A: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
    dq: &mut Tensor4<T>,
) -> KernelStats {
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    let (b_m, b_n) = (tiles.b_m, tiles.b_n);
    let q_blocks = ceil_div(l_q, b_m);
    let key_blocks_full = ceil_div(l_k, b_n) as u64;
    let items = q_blocks * z * h;
    let alpha = A::from_f64(cfg.scale);
    let sigmoid_mode = tiles.sigmoid_mode;

    let writer = RowTable::new(dq.data_mut(), d);

    for_each_item(
        items,
        tiles.worker_count,
        || DqScratch::<A>::new(b_m, b_n, d),
        |idx, scratch| {
            let m = idx % q_blocks;
            let zh = idx / q_blocks;
            let zz = zh / h;
            let hh = zh % h;
            let n_q = batch.n_q[zz];
            let n_k = batch.n_k[zz];
            let bias = A::from_f64(cfg.bias_for(n_k));

            let start_m = m * b_m;
            let end_m = (start_m + b_m).min(l_q);
            let rows = end_m - start_m;
            let row_index = |l: usize| (zz * l_q + l) * h + hh;

            let mut stats = KernelStats {
                total_query_blocks: 1,
                ..Default::default()
            };

            if start_m >= n_q {
                for i in 0..rows {
                    unsafe { writer.zero_row(row_index(start_m + i)) };
                }
                stats.skipped_query_blocks = 1;
                return stats;
            }

            let valid_m = n_q.saturating_sub(start_m).min(rows);
            for i in 0..rows {
                let q_src = batch.q.row(zz, start_m + i, hh);
                let g_src = d_out.row(zz, start_m + i, hh);
                for dd in 0..d {
                    scratch.q[i * d + dd] = A::from_f64(q_src[dd].as_f64());
                    scratch.d_out[i * d + dd] = A::from_f64(g_src[dd].as_f64());
                }
            }
            scratch.acc[..rows * d].fill(A::zero());

            let mut visits = 0u64;
            let mut start_n = 0;
            while start_n < n_k {
                visits += 1;
                let end_n = (start_n + b_n).min(l_k);
                let cols = end_n - start_n;
                let valid_n = n_k.saturating_sub(start_n).min(cols);

                for j in 0..cols {
                    let k_src = batch.k.row(zz, start_n + j, hh);
                    let v_src = batch.v.row(zz, start_n + j, hh);
                    for dd in 0..d {
                        scratch.k[j * d + dd] = A::from_f64(k_src[dd].as_f64());
                        scratch.v[j * d + dd] = A::from_f64(v_src[dd].as_f64());
                    }
                }

                // Recompute S and P for this tile; nothing is carried over
                // from the forward pass.
                for i in 0..rows {
                    let q_row = &scratch.q[i * d..(i + 1) * d];
                    let i_valid = i < valid_m;
                    for j in 0..cols {
                        let x = if i_valid && j < valid_n {
                            dot(q_row, &scratch.k[j * d..(j + 1) * d]) * alpha + bias
                        } else {
                            A::neg_infinity()
                        };
                        scratch.s[i * cols + j] = sigmoid_eval(x, sigmoid_mode);
                    }
                }

                // dS = P (1 - P) * (dOut V^T); dQ_acc += dS K over the valid
                // prefix (masked lanes have dS = 0).
                for i in 0..valid_m {
                    let g_row = &scratch.d_out[i * d..(i + 1) * d];
                    let acc_row = &mut scratch.acc[i * d..(i + 1) * d];
                    for j in 0..valid_n {
                        let p = scratch.s[i * cols + j];
                        let dp = dot(g_row, &scratch.v[j * d..(j + 1) * d]);
                        let ds = p * (A::one() - p) * dp;
                        let k_row = &scratch.k[j * d..(j + 1) * d];
                        for dd in 0..d {
                            acc_row[dd] = acc_row[dd] + ds * k_row[dd];
                        }
                    }
                }

                start_n += b_n;
            }

            stats.total_key_block_visits = key_blocks_full;
            stats.skipped_key_block_visits = key_blocks_full - visits;

            // Scale factor applied once at the end, after accumulation.
            for i in 0..rows {
                let acc_row = &mut scratch.acc[i * d..(i + 1) * d];
                for slot in acc_row.iter_mut() {
                    *slot = *slot * alpha;
                }
                unsafe {
                    writer.write_row(row_index(start_m + i), &scratch.acc[i * d..(i + 1) * d])
                };
            }
            stats
        },
    )
}

/// Tiled backward pass for query gradients.
pub fn blocked_backward_dq<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, KernelStats)> {
    let mut dq = Tensor4::zeros(batch.q.dims());
    let stats = blocked_backward_dq_into(batch, cfg, tiles, d_out, &mut dq)?;
    Ok((dq, stats))
}

pub fn blocked_backward_dq_into<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
    dq: &mut Tensor4<T>,
) -> Result<KernelStats> {
    validate_sigmoid_call(batch, cfg, tiles)?;
    check_grad_shape(batch, d_out, "d_out")?;
    check_grad_shape(batch, dq, "dq")?;
    Ok(match tiles.accumulator_precision {
        AccumulatorPrecision::Double => dq_impl::<T, f64>(batch, cfg, tiles, d_out, dq),
        AccumulatorPrecision::Single => dq_impl::<T, T>(batch, cfg, tiles, d_out, dq),
    })
}

// ---------------------------------------------------------------------------
// Backward dK/dV
// ---------------------------------------------------------------------------

struct DkdvScratch<A> {
    k: Vec<A>,
    v: Vec<A>,
    q: Vec<A>,
    d_out: Vec<A>,
    s_t: Vec<A>,
    acc_dk: Vec<A>,
    acc_dv: Vec<A>,
}

impl<A: Real> DkdvScratch<A> {
    fn new(b_m: usize, b_n: usize, d: usize) -> Self {
        Self {
            k: vec![A::zero(); b_n * d],
            v: vec![A::zero(); b_n * d],
            q: vec![A::zero(); b_m * d],
            d_out: vec![A::zero(); b_m * d],
            s_t: vec![A::zero(); b_n * b_m],
            acc_dk: vec![A::zero(); b_n * d],
            acc_dv: vec![A::zero(); b_n * d],
        }
    }
}

fn dkdv_impl<T: Real, A: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
    dk: &mut Tensor4<T>,
    dv: &mut Tensor4<T>,
) -> KernelStats {
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    let (b_m, b_n) = (tiles.b_m, tiles.b_n);
    let k_blocks = ceil_div(l_k, b_n);
    let q_blocks_full = ceil_div(l_q, b_m) as u64;
    let items = k_blocks * z * h;
    let alpha = A::from_f64(cfg.scale);
    let sigmoid_mode = tiles.sigmoid_mode;

    let dk_writer = RowTable::new(dk.data_mut(), d);
    let dv_writer = RowTable::new(dv.data_mut(), d);

    for_each_item(
        items,
        tiles.worker_count,
        || DkdvScratch::<A>::new(b_m, b_n, d),
        |idx, scratch| {
            let n = idx % k_blocks;
            let zh = idx / k_blocks;
            let zz = zh / h;
            let hh = zh % h;
            let n_q = batch.n_q[zz];
            let n_k = batch.n_k[zz];
            let bias = A::from_f64(cfg.bias_for(n_k));

            let start_n = n * b_n;
            let end_n = (start_n + b_n).min(l_k);
            let cols = end_n - start_n;
            let row_index = |l: usize| (zz * l_k + l) * h + hh;

            // This kernel's grid runs over key blocks.
            let mut stats = KernelStats {
                total_key_block_visits: 1,
                ..Default::default()
            };

            if start_n >= n_k {
                for j in 0..cols {
                    unsafe {
                        dk_writer.zero_row(row_index(start_n + j));
                        dv_writer.zero_row(row_index(start_n + j));
                    }
                }
                stats.skipped_key_block_visits = 1;
                return stats;
            }

            let valid_n = n_k.saturating_sub(start_n).min(cols);
            for j in 0..cols {
                let k_src = batch.k.row(zz, start_n + j, hh);
                let v_src = batch.v.row(zz, start_n + j, hh);
                for dd in 0..d {
                    scratch.k[j * d + dd] = A::from_f64(k_src[dd].as_f64());
                    scratch.v[j * d + dd] = A::from_f64(v_src[dd].as_f64());
                }
            }
            scratch.acc_dk[..cols * d].fill(A::zero());
            scratch.acc_dv[..cols * d].fill(A::zero());

            let mut visits = 0u64;
            let mut start_m = 0;
            while start_m < n_q {
                visits += 1;
                let end_m = (start_m + b_m).min(l_q);
                let rows = end_m - start_m;
                let valid_m = n_q.saturating_sub(start_m).min(rows);

                for i in 0..rows {
                    let q_src = batch.q.row(zz, start_m + i, hh);
                    let g_src = d_out.row(zz, start_m + i, hh);
                    for dd in 0..d {
                        scratch.q[i * d + dd] = A::from_f64(q_src[dd].as_f64());
                        scratch.d_out[i * d + dd] = A::from_f64(g_src[dd].as_f64());
                    }
                }

                // Recompute the transposed score tile S^T = K Q^T.
                for j in 0..cols {
                    let k_row = &scratch.k[j * d..(j + 1) * d];
                    let j_valid = j < valid_n;
                    for i in 0..rows {
                        let x = if j_valid && i < valid_m {
                            dot(k_row, &scratch.q[i * d..(i + 1) * d]) * alpha + bias
                        } else {
                            A::neg_infinity()
                        };
                        scratch.s_t[j * rows + i] = sigmoid_eval(x, sigmoid_mode);
                    }
                }

                // dV += P^T dOut ; dK_acc += [P^T (1 - P^T) * (V dOut^T)] Q
                for j in 0..valid_n {
                    let v_row = &scratch.v[j * d..(j + 1) * d];
                    for i in 0..valid_m {
                        let p = scratch.s_t[j * rows + i];
                        let g_row = &scratch.d_out[i * d..(i + 1) * d];
                        {
                            let dv_row = &mut scratch.acc_dv[j * d..(j + 1) * d];
                            for dd in 0..d {
                                dv_row[dd] = dv_row[dd] + p * g_row[dd];
                            }
                        }
                        let dp = dot(v_row, g_row);
                        let ds = p * (A::one() - p) * dp;
                        let q_row = &scratch.q[i * d..(i + 1) * d];
                        let dk_row = &mut scratch.acc_dk[j * d..(j + 1) * d];
                        for dd in 0..d {
                            dk_row[dd] = dk_row[dd] + ds * q_row[dd];
                        }
                    }
                }

                start_m += b_m;
            }

            stats.total_query_blocks = q_blocks_full;
            stats.skipped_query_blocks = q_blocks_full - visits;

            for j in 0..cols {
                let dk_row = &mut scratch.acc_dk[j * d..(j + 1) * d];
                for slot in dk_row.iter_mut() {
                    *slot = *slot * alpha;
                }
                unsafe {
                    dk_writer.write_row(row_index(start_n + j), &scratch.acc_dk[j * d..(j + 1) * d]);
                    dv_writer.write_row(row_index(start_n + j), &scratch.acc_dv[j * d..(j + 1) * d]);
                }
            }
            stats
        },
    )
}

/// Tiled backward pass for key and value gradients. The grid runs over key
/// blocks, so dK/dV output regions are disjoint per work item and no atomic
/// accumulation is needed.
pub fn blocked_backward_dkdv<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, KernelStats)> {
    let mut dk = Tensor4::zeros(batch.k.dims());
    let mut dv = Tensor4::zeros(batch.v.dims());
    let stats = blocked_backward_dkdv_into(batch, cfg, tiles, d_out, &mut dk, &mut dv)?;
    Ok((dk, dv, stats))
}

pub fn blocked_backward_dkdv_into<T: Real>(
    batch: &JaggedBatch<T>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    d_out: &Tensor4<T>,
    dk: &mut Tensor4<T>,
    dv: &mut Tensor4<T>,
) -> Result<KernelStats> {
    validate_sigmoid_call(batch, cfg, tiles)?;
    check_grad_shape(batch, d_out, "d_out")?;
    if dk.dims() != batch.k.dims() || dv.dims() != batch.v.dims() {
        return Err(Error::Dimension(format!(
            "dk/dv dims {:?}/{:?} do not match k dims {:?}",
            dk.dims(),
            dv.dims(),
            batch.k.dims()
        )));
    }
    Ok(match tiles.accumulator_precision {
        AccumulatorPrecision::Double => dkdv_impl::<T, f64>(batch, cfg, tiles, d_out, dk, dv),
        AccumulatorPrecision::Single => dkdv_impl::<T, T>(batch, cfg, tiles, d_out, dk, dv),
    })
}

/// Closed-form count of skippable query blocks:
/// `H * sum_z max(0, ceil(L_q/B_M) - ceil(n_q[z]/B_M))`.
pub fn expected_skipped_query_blocks(
    n_q: &[usize],
    l_q: usize,
    b_m: usize,
    heads: usize,
) -> u64 {
    let total = ceil_div(l_q, b_m);
    n_q.iter()
        .map(|&n| (total - ceil_div(n, b_m)) as u64)
        .sum::<u64>()
        * heads as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{generate_batch_with_lengths, JaggedBatch};
    use crate::reference::{dense_backward, dense_forward, BiasMode};
    use crate::tensor::max_rel_err_scaled;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_d_out<T: Real>(dims: [usize; 4], n_q: &[usize], seed: u64) -> Tensor4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor4::zeros(dims);
        for zz in 0..dims[0] {
            for l in 0..n_q[zz] {
                for hh in 0..dims[2] {
                    for slot in t.row_mut(zz, l, hh).iter_mut() {
                        *slot = T::from_f64(rng.random_range(-1.0..1.0));
                    }
                }
            }
        }
        t
    }

    #[test]
    fn sigmoid_eval_anchor_points() {
        for mode in [SigmoidMode::Exact, SigmoidMode::TanhApprox] {
            assert_eq!(sigmoid_eval(0.0f64, mode), 0.5);
            assert_eq!(sigmoid_eval(f64::NEG_INFINITY, mode), 0.0);
            assert_eq!(sigmoid_eval(0.0f32, mode), 0.5);
            assert_eq!(sigmoid_eval(f32::NEG_INFINITY, mode), 0.0);
        }
        for x in [-30.0f64, -1.0, 0.0, 1.0, 30.0] {
            let exact = sigmoid_eval(x, SigmoidMode::Exact);
            let approx = sigmoid_eval(x, SigmoidMode::TanhApprox);
            assert!((exact - approx).abs() <= 1e-6, "x={x}");
        }
    }

    #[test]
    fn single_token_single_block_matches_closed_form() {
        let batch: JaggedBatch<f64> = generate_batch_with_lengths(&[1], 1, 1, 4, 5).unwrap();
        let cfg = AttentionConfig::sigmoid(4);
        let tiles = TileConfig::new(64, 64);
        let (out, stats) = blocked_forward(&batch, &cfg, &tiles).unwrap();
        let dense = dense_forward(&batch, &cfg).unwrap();
        assert_eq!(out, dense);
        assert_eq!(stats.total_query_blocks, 1);
        assert_eq!(stats.skipped_query_blocks, 0);
        // Closed form: sigma(alpha q.k) v with b = -ln(1) = 0.
        let mut s = 0.0;
        for dd in 0..4 {
            s += batch.q.at(0, 0, 0, dd) * batch.k.at(0, 0, 0, dd);
        }
        let w = sigmoid_eval(s * cfg.scale, SigmoidMode::Exact);
        for dd in 0..4 {
            assert!((out.at(0, 0, 0, dd) - w * batch.v.at(0, 0, 0, dd)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_dense_and_counts_skipped_blocks() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[128, 96], 128, 1, 8, 11).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let tiles = TileConfig::new(32, 32);
        let (out, stats) = blocked_forward(&batch, &cfg, &tiles).unwrap();
        let dense = dense_forward(&batch.convert::<f64>(), &cfg).unwrap();
        let err = max_rel_err_scaled(out.data(), dense.data());
        assert!(err <= 1e-5, "err {err}");
        // Sequence 1 has ceil(96/32) = 3 of 4 blocks valid: exactly one skip.
        assert_eq!(stats.skipped_query_blocks, 1);
        assert_eq!(stats.total_query_blocks, 8);
        assert_eq!(
            stats.skipped_query_blocks,
            expected_skipped_query_blocks(&batch.n_q, 128, 32, 1)
        );
    }

    #[test]
    fn pad_poison_leaves_forward_and_backward_bitwise_unchanged() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[40, 64, 17], 64, 2, 8, 13).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let tiles = TileConfig::new(16, 16);
        let d_out = random_d_out::<f32>(batch.q.dims(), &batch.n_q, 29);

        let (out0, _) = blocked_forward(&batch, &cfg, &tiles).unwrap();
        let (dq0, _) = blocked_backward_dq(&batch, &cfg, &tiles, &d_out).unwrap();
        let (dk0, dv0, _) = blocked_backward_dkdv(&batch, &cfg, &tiles, &d_out).unwrap();

        for poison in [1e6f32, f32::NAN] {
            let mut poisoned = batch.clone();
            poisoned.poison_padding(poison);
            let (out, _) = blocked_forward(&poisoned, &cfg, &tiles).unwrap();
            let (dq, _) = blocked_backward_dq(&poisoned, &cfg, &tiles, &d_out).unwrap();
            let (dk, dv, _) = blocked_backward_dkdv(&poisoned, &cfg, &tiles, &d_out).unwrap();
            assert_eq!(out0, out, "poison {poison}");
            assert_eq!(dq0, dq, "poison {poison}");
            assert_eq!(dk0, dk, "poison {poison}");
            assert_eq!(dv0, dv, "poison {poison}");
        }
    }

    #[test]
    fn padded_query_rows_are_exactly_zero() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[5, 3], 8, 2, 4, 31).unwrap();
        let cfg = AttentionConfig::sigmoid(4);
        let (out, _) = blocked_forward(&batch, &cfg, &TileConfig::new(4, 4)).unwrap();
        for zz in 0..2 {
            for l in batch.n_q[zz]..8 {
                for hh in 0..2 {
                    assert!(out.row(zz, l, hh).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn dq_zero_upstream_is_exactly_zero() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[9, 4], 12, 1, 4, 37).unwrap();
        let cfg = AttentionConfig::sigmoid(4);
        let d_out = Tensor4::zeros(batch.q.dims());
        let (dq, _) = blocked_backward_dq(&batch, &cfg, &TileConfig::new(8, 8), &d_out).unwrap();
        assert!(dq.data().iter().all(|&x| x == 0.0));
        let (dk, dv, _) =
            blocked_backward_dkdv(&batch, &cfg, &TileConfig::new(8, 8), &d_out).unwrap();
        assert!(dk.data().iter().all(|&x| x == 0.0));
        assert!(dv.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dq_matches_dense_oracle_in_both_precisions() {
        let lengths = [48usize];
        let batch64: JaggedBatch<f64> =
            generate_batch_with_lengths(&lengths, 48, 1, 8, 41).unwrap();
        let batch32 = batch64.convert::<f32>();
        let cfg = AttentionConfig::sigmoid(8);
        let tiles = TileConfig::new(16, 16);
        let d_out64 = random_d_out::<f64>(batch64.q.dims(), &lengths, 43);
        let d_out32 = d_out64.convert::<f32>();
        // Oracle sees the f32-rounded inputs so both paths share operands.
        let oracle_batch = batch32.convert::<f64>();
        let oracle_d_out = d_out32.convert::<f64>();
        let (dq_ref, _, _) = dense_backward(&oracle_batch, &cfg, &oracle_d_out).unwrap();

        let (dq32, _) = blocked_backward_dq(&batch32, &cfg, &tiles, &d_out32).unwrap();
        let err32 = max_rel_err_scaled(dq32.data(), dq_ref.data());
        assert!(err32 <= 1e-5, "f32 err {err32}");

        let (dq64, _) = blocked_backward_dq(&oracle_batch, &cfg, &tiles, &oracle_d_out).unwrap();
        let err64 = max_rel_err_scaled(dq64.data(), dq_ref.data());
        assert!(err64 <= 1e-10, "f64 err {err64}");
    }

    #[test]
    fn dq_is_linear_in_scale_with_frozen_weights() {
        // All scores equal 0.5 exactly (dyadic values), so (alpha, 0) and
        // (2 alpha, -alpha/2... ) compensate exactly: score = 0.125 both ways.
        let z = 1;
        let (l, h, d) = (6, 1, 4);
        let mut q = Tensor4::zeros([z, l, h, d]);
        let mut k = Tensor4::zeros([z, l, h, d]);
        let mut v = Tensor4::zeros([z, l, h, d]);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for i in 0..l {
            *q.at_mut(0, i, 0, 0) = 0.5;
            *k.at_mut(0, i, 0, 0) = 1.0;
            for dd in 0..d {
                *v.at_mut(0, i, 0, dd) = rng.random_range(-1.0f64..1.0);
            }
        }
        let batch = JaggedBatch::new(q, k, v, vec![l], vec![l]).unwrap();
        let d_out = random_d_out::<f64>(batch.q.dims(), &batch.n_q, 53);
        let tiles = TileConfig::new(4, 4);

        // raw score q.k = 0.5; alpha1 = 0.25, b1 = 0 -> s = 0.125
        // alpha2 = 0.5, b2 = -0.125 -> s = 0.25 - 0.125 = 0.125 (same P).
        let cfg1 = AttentionConfig::sigmoid(d)
            .with_scale(0.25)
            .with_bias(BiasMode::Fixed(0.0));
        let cfg2 = AttentionConfig::sigmoid(d)
            .with_scale(0.5)
            .with_bias(BiasMode::Fixed(-0.125));
        let (dq1, _) = blocked_backward_dq(&batch, &cfg1, &tiles, &d_out).unwrap();
        let (dq2, _) = blocked_backward_dq(&batch, &cfg2, &tiles, &d_out).unwrap();
        for (a, b) in dq1.data().iter().zip(dq2.data().iter()) {
            // Doubling alpha doubles dQ exactly (power-of-two scaling).
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn dkdv_matches_dense_oracle() {
        let lengths = [40usize, 64];
        let batch64: JaggedBatch<f64> =
            generate_batch_with_lengths(&lengths, 64, 2, 8, 59).unwrap();
        let batch32 = batch64.convert::<f32>();
        let oracle_batch = batch32.convert::<f64>();
        let cfg = AttentionConfig::sigmoid(8);
        let tiles = TileConfig::new(16, 16);
        let d_out32 = random_d_out::<f32>(batch32.q.dims(), &lengths, 61);
        let oracle_d_out = d_out32.convert::<f64>();
        let (_, dk_ref, dv_ref) = dense_backward(&oracle_batch, &cfg, &oracle_d_out).unwrap();
        let (dk, dv, _) = blocked_backward_dkdv(&batch32, &cfg, &tiles, &d_out32).unwrap();
        let ek = max_rel_err_scaled(dk.data(), dk_ref.data());
        let ev = max_rel_err_scaled(dv.data(), dv_ref.data());
        assert!(ek <= 1e-5, "dk err {ek}");
        assert!(ev <= 1e-5, "dv err {ev}");
        let (dk64, dv64, _) =
            blocked_backward_dkdv(&oracle_batch, &cfg, &tiles, &oracle_d_out).unwrap();
        assert!(max_rel_err_scaled(dk64.data(), dk_ref.data()) <= 1e-10);
        assert!(max_rel_err_scaled(dv64.data(), dv_ref.data()) <= 1e-10);
    }

    #[test]
    fn saturated_high_bias_reduces_dv_to_row_sums() {
        let lengths = [6usize];
        let batch: JaggedBatch<f64> = generate_batch_with_lengths(&lengths, 6, 1, 3, 67).unwrap();
        let cfg = AttentionConfig::sigmoid(3).with_bias(BiasMode::Fixed(20.0));
        let d_out = random_d_out::<f64>(batch.q.dims(), &lengths, 71);
        let (dk, dv, _) =
            blocked_backward_dkdv(&batch, &cfg, &TileConfig::new(4, 4), &d_out).unwrap();
        // P ~ 1: dV_j ~ sum over valid i of dOut_i; dK ~ 0 via sigma'.
        for j in 0..6 {
            for dd in 0..3 {
                let mut expect = 0.0;
                for i in 0..6 {
                    expect += d_out.at(0, i, 0, dd);
                }
                assert!((dv.at(0, j, 0, dd) - expect).abs() < 1e-5);
            }
        }
        assert!(dk.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn tile_size_invariance() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[100, 64, 31], 128, 2, 8, 73).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let d_out = random_d_out::<f32>(batch.q.dims(), &batch.n_q, 79);
        let small = TileConfig::new(16, 16);
        let large = TileConfig::new(64, 64);
        let (o_a, _) = blocked_forward(&batch, &cfg, &small).unwrap();
        let (o_b, _) = blocked_forward(&batch, &cfg, &large).unwrap();
        assert!(max_rel_err_scaled(o_a.data(), o_b.data()) <= 1e-5);
        let (dq_a, _) = blocked_backward_dq(&batch, &cfg, &small, &d_out).unwrap();
        let (dq_b, _) = blocked_backward_dq(&batch, &cfg, &large, &d_out).unwrap();
        assert!(max_rel_err_scaled(dq_a.data(), dq_b.data()) <= 1e-5);
    }

    #[test]
    fn noskip_output_is_bitwise_identical_and_skips_nothing() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[20, 64], 64, 1, 4, 83).unwrap();
        let cfg = AttentionConfig::sigmoid(4);
        let tiles = TileConfig::new(16, 16);
        let (skip_out, skip_stats) = blocked_forward(&batch, &cfg, &tiles).unwrap();
        let (noskip_out, noskip_stats) = blocked_forward_noskip(&batch, &cfg, &tiles).unwrap();
        assert_eq!(skip_out, noskip_out);
        assert_eq!(noskip_stats.skipped_query_blocks, 0);
        assert_eq!(noskip_stats.skipped_key_block_visits, 0);
        assert!(skip_stats.skipped_query_blocks > 0);
        assert!(skip_stats.skipped_key_block_visits > 0);
    }

    #[test]
    fn parallel_execution_is_bitwise_deterministic() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[50, 64, 9], 64, 2, 8, 89).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let d_out = random_d_out::<f32>(batch.q.dims(), &batch.n_q, 97);
        let seq = TileConfig::new(16, 16);
        let par = TileConfig {
            worker_count: 4,
            ..seq
        };
        let (o1, s1) = blocked_forward(&batch, &cfg, &seq).unwrap();
        let (o2, s2) = blocked_forward(&batch, &cfg, &par).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(s1, s2);
        let (dq1, _) = blocked_backward_dq(&batch, &cfg, &seq, &d_out).unwrap();
        let (dq2, _) = blocked_backward_dq(&batch, &cfg, &par, &d_out).unwrap();
        assert_eq!(dq1, dq2);
        let (dk1, dv1, _) = blocked_backward_dkdv(&batch, &cfg, &seq, &d_out).unwrap();
        let (dk2, dv2, _) = blocked_backward_dkdv(&batch, &cfg, &par, &d_out).unwrap();
        assert_eq!(dk1, dk2);
        assert_eq!(dv1, dv2);
    }

    #[test]
    fn single_accumulators_stay_close_to_oracle() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[96, 64], 96, 1, 8, 101).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let tiles = TileConfig {
            accumulator_precision: AccumulatorPrecision::Single,
            ..TileConfig::new(32, 32)
        };
        let (out, _) = blocked_forward(&batch, &cfg, &tiles).unwrap();
        let dense = dense_forward(&batch.convert::<f64>(), &cfg).unwrap();
        let err = max_rel_err_scaled(out.data(), dense.data());
        assert!(err <= 1e-3, "err {err}");
    }

    #[test]
    fn softmax_mechanism_is_rejected() {
        let batch: JaggedBatch<f64> = generate_batch_with_lengths(&[4], 4, 1, 2, 0).unwrap();
        let cfg = AttentionConfig::softmax(2);
        assert!(matches!(
            blocked_forward(&batch, &cfg, &TileConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn tanh_mode_agrees_with_exact_mode() {
        let batch: JaggedBatch<f32> =
            generate_batch_with_lengths(&[30, 17], 32, 1, 8, 103).unwrap();
        let cfg = AttentionConfig::sigmoid(8);
        let exact = TileConfig::new(8, 8);
        let tanh = TileConfig {
            sigmoid_mode: SigmoidMode::TanhApprox,
            ..exact
        };
        let (o1, _) = blocked_forward(&batch, &cfg, &exact).unwrap();
        let (o2, _) = blocked_forward(&batch, &cfg, &tanh).unwrap();
        assert!(max_rel_err_scaled(o1.data(), o2.data()) <= 1e-5);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn skip_accounting_matches_closed_form(
            seed in 0u64..1000,
            l in 4usize..48,
            b_m in 1usize..9,
            b_n in 1usize..9,
            z in 1usize..4,
            h in 1usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lengths: Vec<usize> = (0..z).map(|_| rng.random_range(1..=l)).collect();
            let batch: JaggedBatch<f32> =
                generate_batch_with_lengths(&lengths, l, h, 4, seed).unwrap();
            let cfg = AttentionConfig::sigmoid(4);
            let tiles = TileConfig::new(b_m, b_n);
            let (_, stats) = blocked_forward(&batch, &cfg, &tiles).unwrap();
            proptest::prop_assert_eq!(
                stats.skipped_query_blocks,
                expected_skipped_query_blocks(&lengths, l, b_m, h)
            );
            proptest::prop_assert!(stats.skipped_query_blocks <= stats.total_query_blocks);
            proptest::prop_assert!(
                stats.skipped_key_block_visits <= stats.total_key_block_visits
            );
            // Mirrored closed form for the key-block grid of the dK/dV kernel.
            let d_out = Tensor4::zeros(batch.q.dims());
            let (_, _, kv_stats) =
                blocked_backward_dkdv(&batch, &cfg, &tiles, &d_out).unwrap();
            let expected_key_skips: u64 = lengths
                .iter()
                .map(|&n| (l.div_ceil(b_n) - n.div_ceil(b_n)) as u64)
                .sum::<u64>() * h as u64;
            proptest::prop_assert_eq!(kv_stats.skipped_key_block_visits, expected_key_skips);
        }

        #[test]
        fn sigmoid_modes_agree_pointwise(x in -30.0f64..30.0) {
            let exact = sigmoid_eval(x, SigmoidMode::Exact);
            let approx = sigmoid_eval(x, SigmoidMode::TanhApprox);
            proptest::prop_assert!((exact - approx).abs() <= 1e-6);
            proptest::prop_assert!(exact > 0.0 && exact < 1.0);
        }
    }
}

