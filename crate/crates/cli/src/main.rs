use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use promptseg::{run_command, Command, CommandOptions, ModelConfig, SplitChoice};

/// Train, evaluate and run text-promptable segmentation models.
#[derive(Debug, Parser)]
#[command(name = "promptseg", version)]
struct Args {
    /// train, eval, predict, gen-data, reconstruct-demo or ablation.
    #[arg(long)]
    command: Command,
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Images to generate (gen-data).
    #[arg(long, default_value_t = 40)]
    num_images: usize,
    /// Score PGM predictions from this directory instead of a checkpoint (eval).
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Dataset split to read: train, val or all.
    #[arg(long, default_value = "all")]
    split: SplitChoice,
    /// Also write colour overlays (predict).
    #[arg(long)]
    overlay: bool,
    /// Ablation variant, e.g. `full`, `msfa=false`, `mop=false+hiar=false`; repeatable.
    #[arg(long = "variant")]
    variants: Vec<String>,
}

fn run(args: Args) -> anyhow::Result<()> {
    let config = match &args.config {
        Some(path) => ModelConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ModelConfig::default(),
    };
    let mut opts = CommandOptions::new(config);
    opts.data_dir = args.data_dir;
    opts.checkpoint = args.checkpoint;
    opts.out_dir = args.out_dir;
    opts.seed = args.seed;
    opts.num_images = args.num_images;
    opts.pred_dir = args.pred_dir;
    opts.split = args.split;
    opts.overlay = args.overlay;
    opts.variants = args.variants;
    run_command(args.command, &opts)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
