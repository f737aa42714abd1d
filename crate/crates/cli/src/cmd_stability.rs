//! `stability` subcommand: desk-scale masked-LM training runs.

use clap::Args;
use serde::Deserialize;
use serde_json::json;

use sigmoid_attn::lab::{default_stream, run_paired, train, EncoderConfig, TrainConfig};
use sigmoid_attn::seed::derive_seed;
use sigmoid_attn::Mechanism;

use crate::util::{ManifestBuilder, RunContext};
use crate::EXIT_OK;

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Attention mechanism for the single-run mode.
    #[arg(long, value_parser = ["softmax", "sigmoid"], default_value = "sigmoid")]
    mechanism: String,

    /// Run both mechanisms on identical data (shared seed); emits two logs.
    #[arg(long)]
    paired: bool,

    /// JSON config file with optional "encoder" and "train" sections;
    /// explicit flags win over file values.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    #[arg(long)]
    steps: Option<usize>,

    #[arg(long)]
    batch: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    /// Clip gradients at this global L2 norm.
    #[arg(long, conflicts_with = "no_clip")]
    clip: Option<f64>,

    /// Disable gradient clipping (the stress-test setting).
    #[arg(long)]
    no_clip: bool,

    #[arg(long)]
    layers: Option<usize>,

    #[arg(long)]
    d_model: Option<usize>,

    #[arg(long)]
    heads: Option<usize>,

    #[arg(long)]
    vocab: Option<usize>,

    #[arg(long)]
    max_len: Option<usize>,

    #[arg(long)]
    mask_prob: Option<f64>,

    #[arg(long)]
    warmup_steps: Option<usize>,

    /// Output file stem.
    #[arg(long, default_value = "stability")]
    out: String,
}

#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    encoder: Option<EncoderConfig>,
    train: Option<TrainConfig>,
}

pub fn run(ctx: &RunContext, args: StabilityArgs) -> Result<u8, String> {
    let manifest = ManifestBuilder::start("stability");
    let mechanism = match args.mechanism.as_str() {
        "softmax" => Mechanism::Softmax,
        _ => Mechanism::Sigmoid,
    };

    // Defaults, then config file, then flags.
    let mut enc = EncoderConfig::desk_default(mechanism);
    let mut tc = TrainConfig {
        steps: 200,
        seed: derive_seed(ctx.seed, "stability"),
        ..TrainConfig::default()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file: FileConfig =
            serde_json::from_str(&text).map_err(|e| format!("bad config file: {e}"))?;
        if let Some(e) = file.encoder {
            enc = e;
        }
        if let Some(t) = file.train {
            tc = TrainConfig {
                seed: derive_seed(ctx.seed, "stability"),
                ..t
            };
        }
    }
    enc.mechanism = mechanism;
    if let Some(v) = args.layers {
        enc.layers = v;
    }
    if let Some(v) = args.d_model {
        enc.d_model = v;
    }
    if let Some(v) = args.heads {
        enc.heads = v;
    }
    if let Some(v) = args.vocab {
        enc.vocab_size = v;
    }
    if let Some(v) = args.max_len {
        enc.max_len = v;
    }
    if let Some(v) = args.steps {
        tc.steps = v;
    }
    if let Some(v) = args.batch {
        tc.batch = v;
    }
    if let Some(v) = args.lr {
        tc.lr = v;
    }
    if let Some(v) = args.mask_prob {
        tc.mask_prob = v;
    }
    if let Some(v) = args.warmup_steps {
        tc.warmup_steps = v;
    }
    if args.no_clip {
        tc.clip_norm = None;
    } else if let Some(c) = args.clip {
        tc.clip_norm = Some(c);
    }
    enc.validate().map_err(|e| e.to_string())?;
    tc.validate().map_err(|e| e.to_string())?;

    let mut outputs = Vec::new();
    if args.paired {
        let (softmax_log, sigmoid_log) = run_paired(&enc, &tc).map_err(|e| e.to_string())?;
        for (name, log) in [("softmax", &softmax_log), ("sigmoid", &sigmoid_log)] {
            let file = format!("{}_{name}.csv", args.out);
            log.write_csv(&ctx.path(&file)).map_err(|e| e.to_string())?;
            outputs.push(file);
        }
        println!(
            "paired run complete: {} steps x 2 mechanisms -> {}_softmax.csv / {}_sigmoid.csv",
            tc.steps, args.out, args.out
        );
    } else {
        let mut stream = default_stream(&enc, &tc).map_err(|e| e.to_string())?;
        let (_, log) = train(&enc, &tc, &mut stream).map_err(|e| e.to_string())?;
        let file = format!("{}_{}.csv", args.out, args.mechanism);
        log.write_csv(&ctx.path(&file)).map_err(|e| e.to_string())?;
        outputs.push(file.clone());
        let non_finite = log.steps.iter().filter(|s| !s.loss.is_finite()).count();
        println!(
            "trained {} steps ({non_finite} non-finite loss rows) -> {}",
            log.steps.len(),
            ctx.path(&file).display()
        );
    }

    // Full resolved run configuration next to the logs.
    let config_json = json!({ "encoder": enc, "train": tc, "paired": args.paired });
    let config_file = format!("{}_config.json", args.out);
    crate::util::write_file(
        &ctx.path(&config_file),
        &serde_json::to_string_pretty(&config_json).unwrap(),
    )?;
    outputs.push(config_file);
    manifest.write(ctx, &args.out, config_json, &outputs)?;
    Ok(EXIT_OK)
}
