//! `bench` subcommand: the throughput sweep.

use clap::Args;
use serde_json::json;

use sigmoid_attn::bench::{emit_report, run_grid, BenchConfig, ImplKind, ReportFormat};
use sigmoid_attn::kernel::TileConfig;
use sigmoid_attn::seed::derive_seed;

use crate::util::{parse_list, ManifestBuilder, RunContext};
use crate::{EXIT_OK, EXIT_VERIFICATION_FAILURE};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "512,1024,2048,4096,8192,16384")]
    seq_lens: String,

    /// Total tokens per batch: batch size = token-budget / length.
    #[arg(long, default_value_t = 16384)]
    token_budget: usize,

    /// Comma-separated head dimensions.
    #[arg(long, default_value = "64,128")]
    head_dims: String,

    /// Comma-separated padding fractions in [0, 1).
    #[arg(long, default_value = "0,0.25")]
    padding: String,

    /// Attention heads per configuration.
    #[arg(long, default_value_t = 1)]
    heads: usize,

    /// Timed iterations per configuration (>= 2).
    #[arg(long, default_value_t = 250)]
    iterations: usize,

    #[arg(long, default_value_t = 100)]
    warmup_ms: u64,

    /// Confidence level for the CI half-width.
    #[arg(long, default_value_t = 0.99)]
    confidence: f64,

    /// Implementations to measure: blocked, blocked-noskip, dense.
    #[arg(long, default_value = "blocked,dense")]
    impls: String,

    /// Query block size.
    #[arg(long, default_value_t = 64)]
    b_m: usize,

    /// Key block size.
    #[arg(long, default_value_t = 64)]
    b_n: usize,

    #[arg(long, value_parser = ["csv", "json"], default_value = "csv")]
    format: String,

    /// Output file stem.
    #[arg(long, default_value = "bench_report")]
    out: String,
}

pub fn run(ctx: &RunContext, args: BenchArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("bench");
    let cfg = BenchConfig {
        seq_lengths: parse_list(&args.seq_lens, "sequence length")?,
        token_budget: args.token_budget,
        head_dims: parse_list(&args.head_dims, "head dim")?,
        padding_fractions: parse_list(&args.padding, "padding fraction")?,
        iterations: args.iterations,
        warmup_ms: args.warmup_ms,
        confidence: args.confidence,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let impls: Vec<ImplKind> = parse_list::<String>(&args.impls, "impl")?
        .iter()
        .map(|s| ImplKind::parse(s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if impls.is_empty() {
        return Err("at least one impl is required".into());
    }
    let tiles = TileConfig::new(args.b_m, args.b_n);
    tiles.validate().map_err(|e| e.to_string())?;

    let outcome = run_grid(&cfg, args.heads, &impls, &tiles, derive_seed(ctx.seed, "bench"))
        .map_err(|e| e.to_string())?;

    let (format, extension) = match args.format.as_str() {
        "json" => (ReportFormat::Json, "json"),
        _ => (ReportFormat::Csv, "csv"),
    };
    let report_name = format!("{}.{extension}", args.out);
    let report_path = ctx.path(&report_name);
    let mut outputs = Vec::new();
    if !outcome.records.is_empty() {
        emit_report(&outcome.records, format, &report_path).map_err(|e| e.to_string())?;
        outputs.push(report_name.clone());
        println!(
            "{} records ({} failed configs) -> {}",
            outcome.records.len(),
            outcome.failures.len(),
            report_path.display()
        );
    }
    for failure in &outcome.failures {
        eprintln!(
            "failed config: {} {} n={} d={} padding={}: {}",
            failure.impl_name, failure.direction, failure.n, failure.d, failure.padding,
            failure.message
        );
    }
    let config_json = json!({
        "bench": cfg,
        "heads": args.heads,
        "impls": impls,
        "tiles": tiles,
        "format": args.format,
        "failures": outcome.failures,
    });
    manifest.write(ctx, &args.out, config_json, &outputs)?;
    if outcome.records.is_empty() {
        eprintln!("every configuration failed");
        return Ok(EXIT_VERIFICATION_FAILURE);
    }
    Ok(EXIT_OK)
}
