//! `gradcheck` subcommand: blocked kernels vs central finite differences.

use clap::Args;
use serde_json::json;

use sigmoid_attn::analysis::gradcheck_attention;
use sigmoid_attn::batch::generate_batch_with_lengths;
use sigmoid_attn::kernel::{blocked_backward_dq, blocked_forward, TileConfig};
use sigmoid_attn::seed::derive_seed;
use sigmoid_attn::tensor::{rel_err, Tensor4};
use sigmoid_attn::{AttentionConfig, JaggedBatch};

use crate::util::{ManifestBuilder, RunContext};
use crate::{EXIT_OK, EXIT_VERIFICATION_FAILURE};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Sequences in the batch.
    #[arg(long, default_value_t = 2)]
    z: usize,

    /// Valid tokens per sequence (padded length is n + padding).
    #[arg(long, default_value_t = 6)]
    n: usize,

    /// Extra trailing pad positions.
    #[arg(long, default_value_t = 2)]
    padding: usize,

    #[arg(long, default_value_t = 1)]
    heads: usize,

    #[arg(long, default_value_t = 4)]
    head_dim: usize,

    #[arg(long, default_value_t = 4)]
    b_m: usize,

    #[arg(long, default_value_t = 4)]
    b_n: usize,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h_step: f64,

    /// Pass threshold on the worst relative error.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,

    /// Output file stem.
    #[arg(long, default_value = "gradcheck_report")]
    out: String,

    /// Negative control: corrupt one analytic gradient entry and confirm
    /// the check fails.
    #[arg(long, hide = true)]
    inject_bug: bool,
}

pub fn run(ctx: &RunContext, args: GradcheckArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("gradcheck");
    if args.z == 0 || args.n == 0 || args.heads == 0 || args.head_dim == 0 {
        return Err("z, n, heads, head-dim must all be >= 1".into());
    }
    let l = args.n + args.padding;
    let score_entries = args.z * args.heads * l * l;
    if score_entries > 10_000 {
        return Err(format!(
            "instance too large for finite differences ({score_entries} score entries > 1e4)"
        ));
    }
    let lengths = vec![args.n; args.z];
    let seed = derive_seed(ctx.seed, "gradcheck");
    let batch: JaggedBatch<f64> =
        generate_batch_with_lengths(&lengths, l, args.heads, args.head_dim, seed)
            .map_err(|e| e.to_string())?;
    let cfg = AttentionConfig::sigmoid(args.head_dim);
    let tiles = TileConfig::new(args.b_m, args.b_n);
    tiles.validate().map_err(|e| e.to_string())?;

    if args.inject_bug {
        return run_injected(ctx, manifest, &args, &batch, &cfg, &tiles, seed);
    }

    let report_name = format!("{}.json", args.out);
    match gradcheck_attention(&batch, &cfg, &tiles, args.h_step, seed) {
        Ok(report) => {
            let worst = report.worst();
            let passed = worst <= args.tolerance;
            let payload = json!({
                "report": report,
                "tolerance": args.tolerance,
                "passed": passed,
            });
            crate::util::write_file(
                &ctx.path(&report_name),
                &serde_json::to_string_pretty(&payload).unwrap(),
            )?;
            manifest.write(ctx, &args.out, config_json(&args), &[report_name])?;
            println!(
                "gradcheck: max rel err dQ {:.3e}, dK {:.3e}, dV {:.3e} (tolerance {:.1e})",
                report.max_rel_err_dq, report.max_rel_err_dk, report.max_rel_err_dv,
                args.tolerance
            );
            if passed {
                println!("gradcheck: PASS");
                Ok(EXIT_OK)
            } else {
                eprintln!("gradcheck: FAIL (worst {worst:.3e} > {:.1e})", args.tolerance);
                Ok(EXIT_VERIFICATION_FAILURE)
            }
        }
        Err(err) => {
            let payload = json!({ "error": err.to_string(), "passed": false });
            crate::util::write_file(
                &ctx.path(&report_name),
                &serde_json::to_string_pretty(&payload).unwrap(),
            )?;
            manifest.write(ctx, &args.out, config_json(&args), &[report_name])?;
            eprintln!("gradcheck: FAIL ({err})");
            Ok(EXIT_VERIFICATION_FAILURE)
        }
    }
}

fn config_json(args: &GradcheckArgs) -> serde_json::Value {
    json!({
        "z": args.z,
        "n": args.n,
        "padding": args.padding,
        "heads": args.heads,
        "head_dim": args.head_dim,
        "b_m": args.b_m,
        "b_n": args.b_n,
        "h_step": args.h_step,
        "tolerance": args.tolerance,
        "inject_bug": args.inject_bug,
    })
}

/// Corrupts one entry of the analytic dQ, then compares it against the
/// finite-difference oracle; the run must fail.
fn run_injected(
    ctx: &RunContext,
    manifest: ManifestBuilder,
    args: &GradcheckArgs,
    batch: &JaggedBatch<f64>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    seed: u64,
) -> Result<u8, String> {
    use rand::Rng;
    let mut rng = rand_chacha_seed(seed ^ 0xb0);
    let mut d_out = Tensor4::zeros(batch.q.dims());
    for zz in 0..batch.z() {
        for pos in 0..batch.n_q[zz] {
            for hh in 0..batch.heads() {
                for slot in d_out.row_mut(zz, pos, hh).iter_mut() {
                    *slot = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    let (mut dq, _) =
        blocked_backward_dq(batch, cfg, tiles, &d_out).map_err(|e| e.to_string())?;
    *dq.at_mut(0, 0, 0, 0) += 0.5;

    let h = args.h_step;
    let mut worst = 0.0f64;
    let mut offending = None;
    for zz in 0..batch.z() {
        for pos in 0..batch.n_q[zz] {
            for hh in 0..batch.heads() {
                for dd in 0..batch.head_dim() {
                    let mut plus = batch.clone();
                    let mut minus = batch.clone();
                    *plus.q.at_mut(zz, pos, hh, dd) += h;
                    *minus.q.at_mut(zz, pos, hh, dd) -= h;
                    let loss = |b: &JaggedBatch<f64>| -> f64 {
                        let (out, _) = blocked_forward(b, cfg, tiles).unwrap();
                        out.data()
                            .iter()
                            .zip(d_out.data().iter())
                            .map(|(&o, &g)| o * g)
                            .sum()
                    };
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let err = rel_err(dq.at(zz, pos, hh, dd), numeric);
                    if err > worst {
                        worst = err;
                        offending = Some(json!({
                            "tensor": "dQ",
                            "coordinate": [zz, pos, hh, dd],
                            "analytic": dq.at(zz, pos, hh, dd),
                            "numeric": numeric,
                            "rel_err": err,
                        }));
                    }
                }
            }
        }
    }
    let report_name = format!("{}.json", args.out);
    let failed = worst > args.tolerance;
    let payload = json!({
        "injected_bug": true,
        "worst_rel_err": worst,
        "offending": offending,
        "passed": !failed,
    });
    crate::util::write_file(
        &ctx.path(&report_name),
        &serde_json::to_string_pretty(&payload).unwrap(),
    )?;
    manifest.write(ctx, &args.out, config_json(args), &[report_name])?;
    if failed {
        eprintln!("gradcheck (injected bug): detected divergence {worst:.3e} as intended");
        Ok(EXIT_VERIFICATION_FAILURE)
    } else {
        eprintln!("gradcheck (injected bug): corruption was NOT detected");
        Ok(EXIT_OK)
    }
}

fn rand_chacha_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
