//! `probe` subcommand: weight-Jacobian structure and norms.

use clap::Args;
use serde_json::json;

use sigmoid_attn::analysis::{
    composed_input_jacobian_probe, jacobian_norm_probe, sigmoid_derivative_scan,
};
use sigmoid_attn::reference::weight_jacobian_row;
use sigmoid_attn::seed::derive_seed;
use sigmoid_attn::Mechanism;

use crate::util::{parse_list, ManifestBuilder, RunContext};
use crate::{EXIT_OK, EXIT_VERIFICATION_FAILURE};

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Explicit score row (comma-separated). Default: random rows.
    #[arg(long)]
    scores: Option<String>,

    /// Number of random score rows when --scores is absent.
    #[arg(long, default_value_t = 64)]
    random_rows: usize,

    /// Length of each random score row.
    #[arg(long, default_value_t = 8)]
    row_len: usize,

    /// Scale factors applied to the score rows.
    #[arg(long, default_value = "1,10,100")]
    scales: String,

    /// Mechanism the pass/fail verdict applies to; both are always recorded.
    #[arg(long, value_parser = ["sigmoid", "softmax", "both"], default_value = "both")]
    mechanism: String,

    /// Output file stem.
    #[arg(long, default_value = "probe_report")]
    out: String,
}

pub fn run(ctx: &RunContext, args: ProbeArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("probe");
    let scales: Vec<f64> = parse_list(&args.scales, "scale factor")?;
    if scales.is_empty() {
        return Err("at least one scale factor is required".into());
    }
    let rows: Vec<Vec<f64>> = match &args.scores {
        Some(text) => vec![parse_list(text, "score")?],
        None => {
            use rand::Rng;
            use rand::SeedableRng;
            if args.random_rows == 0 || args.row_len < 2 {
                return Err("need random-rows >= 1 and row-len >= 2".into());
            }
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, "probe"));
            (0..args.random_rows)
                .map(|_| (0..args.row_len).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect()
        }
    };

    let mut reports = Vec::with_capacity(rows.len());
    let mut violations: Vec<serde_json::Value> = Vec::new();
    for (idx, row) in rows.iter().enumerate() {
        let report = jacobian_norm_probe(row, &scales).map_err(|e| e.to_string())?;
        for (slot, &norm) in report.sigmoid_spectral_norms.iter().enumerate() {
            if norm > 0.25 + 1e-12 {
                violations.push(json!({
                    "kind": "sigmoid spectral norm above 1/4",
                    "row": idx,
                    "scale": scales[slot],
                    "norm": norm,
                }));
            }
        }
        // Structural checks on the explicit Jacobians.
        for &t in &scales {
            let scaled: Vec<f64> = row.iter().map(|&s| t * s).collect();
            let sig = weight_jacobian_row(&scaled, Mechanism::Sigmoid);
            for i in 0..sig.n {
                for j in 0..sig.n {
                    if i != j && sig.at(i, j) != 0.0 {
                        violations.push(json!({
                            "kind": "sigmoid Jacobian off-diagonal nonzero",
                            "row": idx,
                            "scale": t,
                            "entry": [i, j],
                        }));
                    }
                }
            }
            let soft = weight_jacobian_row(&scaled, Mechanism::Softmax);
            let coupled = (0..soft.n)
                .any(|i| (0..soft.n).any(|j| i != j && soft.at(i, j) != 0.0));
            if !coupled {
                violations.push(json!({
                    "kind": "softmax Jacobian unexpectedly diagonal",
                    "row": idx,
                    "scale": t,
                }));
            }
        }
        reports.push(report);
    }

    let grid: Vec<f64> = (-10_000..=10_000).map(|i| i as f64 * 1e-3).collect();
    let scan = sigmoid_derivative_scan(&grid).map_err(|e| e.to_string())?;
    if scan.max_derivative > 0.25 || scan.argmax.abs() > 1e-3 {
        violations.push(json!({
            "kind": "sigmoid derivative scan off its 1/4-at-zero anchor",
            "max_derivative": scan.max_derivative,
            "argmax": scan.argmax,
        }));
    }
    let composed = composed_input_jacobian_probe(4, 4, &scales, derive_seed(ctx.seed, "probe/composed"))
        .map_err(|e| e.to_string())?;

    let passed = violations.is_empty();
    let report_name = format!("{}.json", args.out);
    let payload = json!({
        "mechanism_focus": args.mechanism,
        "rows": rows.len(),
        "scales": scales,
        "jacobian_probes": reports,
        "derivative_scan": scan,
        "composed_input_jacobian": composed,
        "violations": violations,
        "passed": passed,
    });
    crate::util::write_file(
        &ctx.path(&report_name),
        &serde_json::to_string_pretty(&payload).unwrap(),
    )?;
    manifest.write(
        ctx,
        &args.out,
        json!({
            "scores": args.scores,
            "random_rows": args.random_rows,
            "row_len": args.row_len,
            "scales": scales,
            "mechanism": args.mechanism,
        }),
        &[report_name],
    )?;

    // Human-readable table.
    println!("scale      softmax-norm   sigmoid-norm   max|score|");
    if let Some(first) = reports.first() {
        for i in 0..first.scale_factors.len() {
            let worst_softmax = reports
                .iter()
                .map(|r| r.softmax_spectral_norms[i])
                .fold(0.0f64, f64::max);
            let worst_sigmoid = reports
                .iter()
                .map(|r| r.sigmoid_spectral_norms[i])
                .fold(0.0f64, f64::max);
            let worst_score = reports
                .iter()
                .map(|r| r.max_score_inf_norm[i])
                .fold(0.0f64, f64::max);
            println!(
                "{:<10} {:<14.6} {:<14.6} {:<10.3}",
                first.scale_factors[i], worst_softmax, worst_sigmoid, worst_score
            );
        }
    }
    println!(
        "sigma'(x) max over grid: {:.6} at x = {:.1e}",
        scan.max_derivative, scan.argmax
    );
    if passed {
        println!("probe: PASS (all sigmoid norms <= 0.25, diagonal structure holds)");
        Ok(EXIT_OK)
    } else {
        eprintln!("probe: FAIL ({} violations, see report)", violations.len());
        Ok(EXIT_VERIFICATION_FAILURE)
    }
}
