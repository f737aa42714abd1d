//! `jaggedness` subcommand: sequence-length histogram and coverage table.

use clap::Args;
use serde_json::json;

use sigmoid_attn::batch::{coverage_at_thresholds, sample_lengths, LengthDistributionSpec};
use sigmoid_attn::seed::derive_seed;

use crate::util::{parse_list, ManifestBuilder, RunContext};
use crate::EXIT_OK;

#[derive(Args, Debug)]
pub struct JaggednessArgs {
    /// File with one sequence length per line. Default: synthetic lengths.
    #[arg(long)]
    lengths_file: Option<std::path::PathBuf>,

    /// Generator family when no file is given.
    #[arg(long, value_parser = ["log-normal", "uniform", "fixed"], default_value = "log-normal")]
    family: String,

    /// Log-space location for the log-normal family.
    #[arg(long, default_value_t = 7.0)]
    mu: f64,

    /// Log-space scale for the log-normal family.
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,

    /// Length for the fixed family.
    #[arg(long, default_value_t = 1024)]
    len: usize,

    #[arg(long, default_value_t = 64)]
    min_len: usize,

    #[arg(long, default_value_t = 16384)]
    max_len: usize,

    /// Number of synthetic lengths to draw.
    #[arg(long, default_value_t = 10000)]
    count: usize,

    /// Context-length thresholds for the coverage table.
    #[arg(long, default_value = "2048,4096,8192,16384")]
    thresholds: String,

    #[arg(long, default_value_t = 32)]
    bins: usize,

    /// Output file stem.
    #[arg(long, default_value = "jaggedness")]
    out: String,
}

pub fn run(ctx: &RunContext, args: JaggednessArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("jaggedness");
    let thresholds: Vec<usize> = parse_list(&args.thresholds, "threshold")?;
    if thresholds.is_empty() {
        return Err("at least one threshold is required".into());
    }
    if args.bins == 0 {
        return Err("bins must be >= 1".into());
    }

    let lengths: Vec<usize> = match &args.lengths_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let parsed: Vec<usize> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse().map_err(|_| format!("invalid length line '{l}'")))
                .collect::<Result<_, _>>()?;
            if parsed.is_empty() {
                return Err(format!("{} contains no lengths", path.display()));
            }
            parsed
        }
        None => {
            let spec = match args.family.as_str() {
                "fixed" => LengthDistributionSpec::fixed(args.len),
                "uniform" => LengthDistributionSpec::uniform(
                    args.min_len,
                    args.max_len,
                    derive_seed(ctx.seed, "jaggedness"),
                ),
                _ => LengthDistributionSpec::log_normal(
                    args.mu,
                    args.sigma,
                    args.min_len,
                    args.max_len,
                    derive_seed(ctx.seed, "jaggedness"),
                ),
            };
            if args.count == 0 {
                return Err("count must be >= 1".into());
            }
            sample_lengths(&spec, args.count).map_err(|e| e.to_string())?
        }
    };

    let coverage = coverage_at_thresholds(&lengths, &thresholds).map_err(|e| e.to_string())?;

    // Histogram over [min, max] with equal-width bins.
    let lo = *lengths.iter().min().unwrap();
    let hi = *lengths.iter().max().unwrap();
    let bins = if lo == hi { 1 } else { args.bins };
    let width = ((hi - lo + 1) as f64 / bins as f64).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; bins];
    for &l in &lengths {
        let idx = ((l - lo) / width).min(bins - 1);
        counts[idx] += 1;
    }
    let mut hist_csv = String::from("bin_lo,bin_hi,count\n");
    for (i, &count) in counts.iter().enumerate() {
        let bin_lo = lo + i * width;
        let bin_hi = (bin_lo + width - 1).min(hi);
        hist_csv.push_str(&format!("{bin_lo},{bin_hi},{count}\n"));
    }
    let mut coverage_csv = String::from("threshold,coverage\n");
    for (t, c) in thresholds.iter().zip(coverage.iter()) {
        coverage_csv.push_str(&format!("{t},{c}\n"));
    }

    let hist_name = format!("{}_hist.csv", args.out);
    let coverage_name = format!("{}_coverage.csv", args.out);
    crate::util::write_file(&ctx.path(&hist_name), &hist_csv)?;
    crate::util::write_file(&ctx.path(&coverage_name), &coverage_csv)?;
    manifest.write(
        ctx,
        &args.out,
        json!({
            "lengths_file": args.lengths_file,
            "family": args.family,
            "mu": args.mu,
            "sigma": args.sigma,
            "len": args.len,
            "min_len": args.min_len,
            "max_len": args.max_len,
            "count": lengths.len(),
            "thresholds": thresholds,
            "bins": bins,
        }),
        &[hist_name, coverage_name.clone()],
    )?;
    println!("{} lengths in [{lo}, {hi}]", lengths.len());
    for (t, c) in thresholds.iter().zip(coverage.iter()) {
        println!("coverage at {t:>6}: {:.4}", c);
    }
    Ok(EXIT_OK)
}
