//! `mmd` subcommand: pairwise embedding-set separation table.

use clap::Args;
use serde_json::json;

use sigmoid_attn::batch::load_container;
use sigmoid_attn::mmd::{
    labeled_gaussians, load_embeddings_csv, mmd_table_to_csv, pairwise_mmd_table, EmbeddingSet,
    Estimator,
};
use sigmoid_attn::seed::derive_seed;

use crate::util::{ManifestBuilder, RunContext};
use crate::EXIT_OK;

#[derive(Args, Debug)]
pub struct MmdArgs {
    /// Labeled embeddings CSV (one row per point plus a label column).
    #[arg(long, conflicts_with_all = ["input_a", "synthetic"])]
    input: Option<std::path::PathBuf>,

    /// Column holding the label.
    #[arg(long, default_value = "label")]
    label_col: String,

    /// Batch-container fixture for set A (mean-pooled per sequence);
    /// requires --input-b.
    #[arg(long, requires = "input_b", conflicts_with = "synthetic")]
    input_a: Option<std::path::PathBuf>,

    /// Batch-container fixture for set B.
    #[arg(long, requires = "input_a")]
    input_b: Option<std::path::PathBuf>,

    /// Generate a synthetic Gaussian mixture with this many labels.
    #[arg(long)]
    synthetic: Option<usize>,

    #[arg(long, default_value_t = 50)]
    points_per_label: usize,

    #[arg(long, default_value_t = 8)]
    dim: usize,

    /// Cluster-center spread for the synthetic mixture.
    #[arg(long, default_value_t = 3.0)]
    spread: f64,

    #[arg(long, default_value_t = 1000)]
    resamples: usize,

    #[arg(long, default_value_t = 0.95)]
    ci: f64,

    #[arg(long, value_parser = ["biased", "unbiased"], default_value = "biased")]
    estimator: String,

    /// Output file stem.
    #[arg(long, default_value = "mmd_pairs")]
    out: String,
}

/// Mean-pool the valid query rows of a container batch into one embedding
/// point per sequence (heads concatenated).
fn container_embeddings(path: &std::path::Path, label: &str) -> Result<EmbeddingSet, String> {
    let batch = load_container(path).map_err(|e| e.to_string())?;
    let [z, _l, h, d] = batch.q.dims();
    let mut points = Vec::with_capacity(z);
    for zz in 0..z {
        let mut point = vec![0.0f64; h * d];
        for pos in 0..batch.n_q[zz] {
            for hh in 0..h {
                let row = batch.q.row(zz, pos, hh);
                for dd in 0..d {
                    point[hh * d + dd] += row[dd] as f64;
                }
            }
        }
        let inv = 1.0 / batch.n_q[zz] as f64;
        point.iter_mut().for_each(|v| *v *= inv);
        points.push(point);
    }
    EmbeddingSet::new(points, label).map_err(|e| e.to_string())
}

pub fn run(ctx: &RunContext, args: MmdArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("mmd");
    let estimator = match args.estimator.as_str() {
        "unbiased" => Estimator::Unbiased,
        _ => Estimator::Biased,
    };

    let sets: Vec<EmbeddingSet> = if let Some(path) = &args.input {
        load_embeddings_csv(path, &args.label_col).map_err(|e| e.to_string())?
    } else if let (Some(a), Some(b)) = (&args.input_a, &args.input_b) {
        let stem = |p: &std::path::Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "set".into())
        };
        vec![
            container_embeddings(a, &stem(a))?,
            container_embeddings(b, &stem(b))?,
        ]
    } else if let Some(labels) = args.synthetic {
        labeled_gaussians(
            labels,
            args.points_per_label,
            args.dim,
            args.spread,
            derive_seed(ctx.seed, "mmd/synthetic"),
        )
        .map_err(|e| e.to_string())?
    } else {
        return Err("provide --input, --input-a/--input-b, or --synthetic".into());
    };

    if sets.len() < 2 {
        return Err(format!(
            "need at least 2 labels for pairwise comparisons (got {})",
            sets.len()
        ));
    }

    let rows = pairwise_mmd_table(
        &sets,
        args.resamples,
        args.ci,
        estimator,
        derive_seed(ctx.seed, "mmd"),
    )
    .map_err(|e| e.to_string())?;

    let report_name = format!("{}.csv", args.out);
    crate::util::write_file(&ctx.path(&report_name), &mmd_table_to_csv(&rows))?;
    manifest.write(
        ctx,
        &args.out,
        json!({
            "input": args.input,
            "label_col": args.label_col,
            "input_a": args.input_a,
            "input_b": args.input_b,
            "synthetic": args.synthetic,
            "points_per_label": args.points_per_label,
            "dim": args.dim,
            "spread": args.spread,
            "resamples": args.resamples,
            "ci": args.ci,
            "estimator": args.estimator,
            "labels": sets.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
        }),
        &[report_name.clone()],
    )?;
    println!(
        "{} pairwise comparisons ({} labels) -> {}",
        rows.len(),
        sets.len(),
        ctx.path(&report_name).display()
    );
    Ok(EXIT_OK)
}
