//! FLOP accounting, wall-clock measurement, and throughput reporting.
//!
//! FLOP counts follow the two-matmul model: `4*b*h*n^2*d` forward and 2.5x
//! that (`10*b*h*n^2*d`) backward, covering gradient computation plus
//! activation recomputation. For jagged batches, `n` is each sequence's
//! valid length — padding does no credited work. TFLOPS is
//! `flops / (1e12 * wall-clock seconds)`.
//!
//! Absolute throughput on CPU is not comparable to accelerator numbers; the
//! harness exists for the methodology and for relative properties such as
//! the cost of disabling padded-block skipping.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::batch::{generate_batch_with_lengths, JaggedBatch};
use crate::error::{Error, Result};
use crate::kernel::{
    blocked_backward_dkdv_into, blocked_backward_dq_into, blocked_forward_into,
    blocked_forward_noskip_into, TileConfig,
};
use crate::reference::{dense_backward, dense_forward_into, AttentionConfig};
use crate::seed::derive_seed;
use crate::tensor::Tensor4;

/// Which pass is being measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Forward => write!(f, "forward"),
            Direction::Backward => write!(f, "backward"),
        }
    }
}

/// Benchmark sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_lengths: Vec<usize>,
    /// Batch size per length is `token_budget / length`, floored to >= 1.
    pub token_budget: usize,
    pub head_dims: Vec<usize>,
    pub padding_fractions: Vec<f64>,
    pub iterations: usize,
    pub warmup_ms: u64,
    pub confidence: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_lengths: vec![512, 1024, 2048, 4096, 8192, 16384],
            token_budget: 16384,
            head_dims: vec![64, 128],
            padding_fractions: vec![0.0, 0.25],
            iterations: 250,
            warmup_ms: 100,
            confidence: 0.99,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 {
            return Err(Error::Parameter(
                "iterations must be >= 2 (a confidence interval needs at least 2 samples)".into(),
            ));
        }
        if self.seq_lengths.is_empty() || self.head_dims.is_empty() {
            return Err(Error::EmptyInput("seq_lengths and head_dims must be non-empty".into()));
        }
        if self
            .padding_fractions
            .iter()
            .any(|&p| !(0.0..1.0).contains(&p))
        {
            return Err(Error::Parameter("padding fractions must lie in [0, 1)".into()));
        }
        z_for_confidence(self.confidence)?;
        Ok(())
    }
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "impl")]
    pub impl_name: String,
    pub direction: Direction,
    pub b: usize,
    pub h: usize,
    pub n: usize,
    pub d: usize,
    pub padding: f64,
    pub mean_s: f64,
    pub ci_s: f64,
    pub flops: u128,
    pub tflops: f64,
}

/// Theoretical attention FLOPs for `n_valid` tokens.
pub fn attention_flops(b: usize, h: usize, n_valid: usize, d: usize, direction: Direction) -> u128 {
    let base = 4u128 * b as u128 * h as u128 * (n_valid as u128).pow(2) * d as u128;
    match direction {
        Direction::Forward => base,
        // 2.5x forward: 2.0x gradients + 0.5x recomputation.
        Direction::Backward => base / 4 * 10,
    }
}

/// Jagged-batch FLOPs: the per-sequence formula summed over valid lengths.
pub fn attention_flops_jagged(
    n_valid: &[usize],
    h: usize,
    d: usize,
    direction: Direction,
) -> u128 {
    n_valid
        .iter()
        .map(|&n| attention_flops(1, h, n, d, direction))
        .sum()
}

/// Two-sided normal quantile for the supported confidence levels.
pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    let table = [
        (0.80, 1.2816),
        (0.90, 1.6449),
        (0.95, 1.96),
        (0.98, 2.3263),
        (0.99, 2.576),
    ];
    for (c, z) in table {
        if (confidence - c).abs() < 1e-9 {
            return Ok(z);
        }
    }
    Err(Error::Parameter(format!(
        "unsupported confidence level {confidence}; supported: 0.80, 0.90, 0.95, 0.98, 0.99"
    )))
}

/// Identity of a measured configuration, minus the timing fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub impl_name: String,
    pub direction: Direction,
    pub b: usize,
    pub h: usize,
    pub n: usize,
    pub d: usize,
    pub padding: f64,
    pub flops: u128,
}

/// Time a closure: warmup until `warmup_ms` elapses, then `iterations` timed
/// runs. Mean and CI half-width use the normal approximation with sample
/// standard deviation (Bessel-corrected).
pub fn measure<F>(
    spec: &MeasureSpec,
    iterations: usize,
    warmup_ms: u64,
    confidence: f64,
    mut f: F,
) -> Result<BenchRecord>
where
    F: FnMut() -> Result<()>,
{
    if iterations < 2 {
        return Err(Error::Parameter(
            "iterations must be >= 2 (a confidence interval needs at least 2 samples)".into(),
        ));
    }
    let z = z_for_confidence(confidence)?;
    let warmup = Duration::from_millis(warmup_ms);
    let warmup_start = Instant::now();
    while warmup_start.elapsed() < warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ci = z * var.sqrt() / n.sqrt();
    Ok(BenchRecord {
        impl_name: spec.impl_name.clone(),
        direction: spec.direction,
        b: spec.b,
        h: spec.h,
        n: spec.n,
        d: spec.d,
        padding: spec.padding,
        mean_s: mean,
        ci_s: ci,
        flops: spec.flops,
        tflops: spec.flops as f64 / (1e12 * mean),
    })
}

/// Attention implementations the harness can measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplKind {
    /// Blocked kernel with padded-block skipping.
    Blocked,
    /// Blocked kernel visiting every block (skip-savings baseline).
    BlockedNoskip,
    /// Dense double-precision reference.
    Dense,
}

impl ImplKind {
    pub fn name(&self) -> &'static str {
        match self {
            ImplKind::Blocked => "blocked",
            ImplKind::BlockedNoskip => "blocked-noskip",
            ImplKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blocked" => Ok(ImplKind::Blocked),
            "blocked-noskip" => Ok(ImplKind::BlockedNoskip),
            "dense" => Ok(ImplKind::Dense),
            other => Err(Error::Parameter(format!(
                "unknown impl '{other}' (expected blocked, blocked-noskip, dense)"
            ))),
        }
    }
}

/// Measure one attention implementation on one batch. Output and gradient
/// buffers are preallocated outside the timed region.
pub fn measure_attention(
    kind: ImplKind,
    batch32: &JaggedBatch<f32>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    direction: Direction,
    padding: f64,
    iterations: usize,
    warmup_ms: u64,
    confidence: f64,
) -> Result<BenchRecord> {
    let [z, _l, h, d] = batch32.q.dims();
    let n = batch32.l_q();
    let spec = MeasureSpec {
        impl_name: kind.name().to_string(),
        direction,
        b: z,
        h,
        n,
        d,
        padding,
        flops: attention_flops_jagged(&batch32.n_q, h, d, direction),
    };

    match kind {
        ImplKind::Blocked | ImplKind::BlockedNoskip => {
            let mut out = Tensor4::<f32>::zeros(batch32.q.dims());
            match direction {
                Direction::Forward => {
                    let run: Box<dyn FnMut() -> Result<()>> = if kind == ImplKind::Blocked {
                        Box::new(move || {
                            blocked_forward_into(batch32, cfg, tiles, &mut out).map(|_| ())
                        })
                    } else {
                        Box::new(move || {
                            blocked_forward_noskip_into(batch32, cfg, tiles, &mut out).map(|_| ())
                        })
                    };
                    measure(&spec, iterations, warmup_ms, confidence, run)
                }
                Direction::Backward => {
                    // The no-skip distinction only exists in the forward
                    // kernel; both backward kernels stop at the valid length.
                    let d_out = Tensor4::<f32>::zeros(batch32.q.dims());
                    let mut dq = Tensor4::<f32>::zeros(batch32.q.dims());
                    let mut dk = Tensor4::<f32>::zeros(batch32.k.dims());
                    let mut dv = Tensor4::<f32>::zeros(batch32.v.dims());
                    measure(&spec, iterations, warmup_ms, confidence, move || {
                        blocked_backward_dq_into(batch32, cfg, tiles, &d_out, &mut dq)?;
                        blocked_backward_dkdv_into(batch32, cfg, tiles, &d_out, &mut dk, &mut dv)?;
                        Ok(())
                    })
                }
            }
        }
        ImplKind::Dense => {
            let batch64 = batch32.convert::<f64>();
            match direction {
                Direction::Forward => {
                    let mut out = Tensor4::<f64>::zeros(batch64.q.dims());
                    measure(&spec, iterations, warmup_ms, confidence, move || {
                        dense_forward_into(&batch64, cfg, &mut out)
                    })
                }
                Direction::Backward => {
                    let d_out = Tensor4::<f64>::zeros(batch64.q.dims());
                    measure(&spec, iterations, warmup_ms, confidence, move || {
                        dense_backward(&batch64, cfg, &d_out).map(|_| ())
                    })
                }
            }
        }
    }
}

/// A configuration that raised instead of completing; the sweep records it
/// and moves on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedConfig {
    pub impl_name: String,
    pub direction: Direction,
    pub n: usize,
    pub d: usize,
    pub padding: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<FailedConfig>,
}

/// Run the full benchmark sweep. Measurements are serialized (never
/// concurrent with one another) so they do not interfere.
pub fn run_grid(
    cfg: &BenchConfig,
    heads: usize,
    impls: &[ImplKind],
    tiles: &TileConfig,
    seed: u64,
) -> Result<GridOutcome> {
    cfg.validate()?;
    if heads == 0 {
        return Err(Error::Parameter("heads must be >= 1".into()));
    }
    let mut outcome = GridOutcome {
        records: Vec::new(),
        failures: Vec::new(),
    };
    for &n in &cfg.seq_lengths {
        let z = (cfg.token_budget / n).max(1);
        for &d in &cfg.head_dims {
            for &padding in &cfg.padding_fractions {
                let n_valid = (((n as f64) * (1.0 - padding)).round() as usize).clamp(1, n);
                let lengths = vec![n_valid; z];
                let batch_seed = derive_seed(seed, &format!("bench/{n}/{d}/{padding}"));
                let batch: JaggedBatch<f32> =
                    generate_batch_with_lengths(&lengths, n, heads, d, batch_seed)?;
                let attn = AttentionConfig::sigmoid(d);
                for &kind in impls {
                    for direction in [Direction::Forward, Direction::Backward] {
                        match measure_attention(
                            kind,
                            &batch,
                            &attn,
                            tiles,
                            direction,
                            padding,
                            cfg.iterations,
                            cfg.warmup_ms,
                            cfg.confidence,
                        ) {
                            Ok(record) => outcome.records.push(record),
                            Err(err) => outcome.failures.push(FailedConfig {
                                impl_name: kind.name().to_string(),
                                direction,
                                n,
                                d,
                                padding,
                                message: err.to_string(),
                            }),
                        }
                    }
                }
            }
        }
    }
    Ok(outcome)
}

/// Relative throughput drop `(base - padded) / base`.
pub fn throughput_drop(base_tflops: f64, padded_tflops: f64) -> f64 {
    (base_tflops - padded_tflops) / base_tflops
}

/// Per-config throughput drop between two record sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddingOverheadRow {
    pub impl_name: String,
    pub direction: Direction,
    pub b: usize,
    pub h: usize,
    pub n: usize,
    pub d: usize,
    pub base_tflops: f64,
    pub padded_tflops: f64,
    pub drop: f64,
}

/// Pair base and padded records by (impl, direction, b, h, n, d) and compute
/// the throughput drop for each pair.
pub fn padding_overhead(
    base: &[BenchRecord],
    padded: &[BenchRecord],
) -> Result<Vec<PaddingOverheadRow>> {
    let key = |r: &BenchRecord| (r.impl_name.clone(), r.direction, r.b, r.h, r.n, r.d);
    let mut rows = Vec::with_capacity(base.len());
    for b_rec in base {
        let k = key(b_rec);
        let p_rec = padded
            .iter()
            .find(|r| key(r) == k)
            .ok_or_else(|| {
                Error::Pairing(format!(
                    "no padded record matching {}/{} b={} h={} n={} d={}",
                    b_rec.impl_name, b_rec.direction, b_rec.b, b_rec.h, b_rec.n, b_rec.d
                ))
            })?;
        rows.push(PaddingOverheadRow {
            impl_name: b_rec.impl_name.clone(),
            direction: b_rec.direction,
            b: b_rec.b,
            h: b_rec.h,
            n: b_rec.n,
            d: b_rec.d,
            base_tflops: b_rec.tflops,
            padded_tflops: p_rec.tflops,
            drop: throughput_drop(b_rec.tflops, p_rec.tflops),
        });
    }
    Ok(rows)
}

/// GPU hours to process `samples` at `throughput` steps/second with
/// `batch_size` samples per step across `device_count` devices.
pub fn project_gpu_hours(
    throughput_steps_per_sec: f64,
    samples: u64,
    batch_size: usize,
    device_count: usize,
) -> Result<f64> {
    if !(throughput_steps_per_sec > 0.0) {
        return Err(Error::Parameter(format!(
            "throughput must be > 0 (got {throughput_steps_per_sec})"
        )));
    }
    if batch_size == 0 || device_count == 0 {
        return Err(Error::Parameter("batch_size and device_count must be >= 1".into()));
    }
    let steps = samples as f64 / batch_size as f64;
    Ok(steps / throughput_steps_per_sec / 3600.0 * device_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str = "impl,direction,b,h,n,d,padding,mean_s,ci_s,flops,tflops";

/// Render records as CSV with the fixed column order. Float fields use
/// Rust's shortest round-trip formatting, so parsing the file back yields
/// bitwise-identical values.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.impl_name,
            r.direction,
            r.b,
            r.h,
            r.n,
            r.d,
            r.padding,
            r.mean_s,
            r.ci_s,
            r.flops,
            r.tflops
        ));
    }
    out
}

pub fn parse_records_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV report".into()))?;
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected CSV header: {header}")));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!(
                "row {idx}: expected 11 fields, got {}",
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Format(format!("row {idx}: bad {what}"));
        records.push(BenchRecord {
            impl_name: fields[0].to_string(),
            direction: match fields[1] {
                "forward" => Direction::Forward,
                "backward" => Direction::Backward,
                _ => return Err(parse_err("direction")),
            },
            b: fields[2].parse().map_err(|_| parse_err("b"))?,
            h: fields[3].parse().map_err(|_| parse_err("h"))?,
            n: fields[4].parse().map_err(|_| parse_err("n"))?,
            d: fields[5].parse().map_err(|_| parse_err("d"))?,
            padding: fields[6].parse().map_err(|_| parse_err("padding"))?,
            mean_s: fields[7].parse().map_err(|_| parse_err("mean_s"))?,
            ci_s: fields[8].parse().map_err(|_| parse_err("ci_s"))?,
            flops: fields[9].parse().map_err(|_| parse_err("flops"))?,
            tflops: fields[10].parse().map_err(|_| parse_err("tflops"))?,
        });
    }
    Ok(records)
}

/// Write records to `path` as CSV or JSON. Refuses empty inputs before
/// touching the filesystem.
pub fn emit_report(records: &[BenchRecord], format: ReportFormat, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput("refusing to emit an empty report".into()));
    }
    let payload = match format {
        ReportFormat::Csv => records_to_csv(records),
        ReportFormat::Json => serde_json::to_string_pretty(records)
            .map_err(|e| Error::Format(format!("JSON serialization failed: {e}")))?,
    };
    let mut file = std::fs::File::create(path)?;
    file.write_all(payload.as_bytes())?;
    Ok(())
}

pub fn parse_report_json(text: &str) -> Result<Vec<BenchRecord>> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("JSON parse failed: {e}")))
}
