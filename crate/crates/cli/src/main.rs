mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_config, CliConfig};

#[derive(Parser)]
#[command(name = "mfvc", version, about = "Motion-free learned video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the λ-conditioned auto-encoder on raw frames.
    TrainImage(Opts),
    /// Train the inter-frame entropy model against a frozen auto-encoder.
    TrainStem(Opts),
    /// Encode raw RGB frames into an .mfvc stream.
    Compress(Opts),
    /// Decode an .mfvc stream into raw RGB frames.
    Decompress(Opts),
    /// Decode a stream and write per-frame bits and quality as CSV.
    Eval(Opts),
    /// Compare entropy-model variants by total bits.
    Ablate(Opts),
    /// Write the per-pixel bit map of one inter frame.
    Heatmap(Opts),
}

/// Every option may also come from `--config`.
#[derive(Args, Debug, Default)]
struct Opts {
    /// `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Original raw frames for `eval`.
    #[arg(long)]
    reference: Option<String>,
    /// Auto-encoder weights file.
    #[arg(long)]
    weights: Option<String>,
    /// Entropy-model weights file (for `ablate`, optionally a directory).
    #[arg(long)]
    stem_weights: Option<String>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    gop_size: Option<String>,
    #[arg(long)]
    rate_index: Option<String>,
    #[arg(long)]
    use_spm: Option<String>,
    #[arg(long)]
    use_tpm: Option<String>,
    #[arg(long)]
    use_residual: Option<String>,
    #[arg(long)]
    latent_channels: Option<String>,
    #[arg(long)]
    hidden_channels: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    /// Comma-separated λ values.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    patch_h: Option<String>,
    #[arg(long)]
    patch_w: Option<String>,
    #[arg(long)]
    lr_values: Option<String>,
    #[arg(long)]
    lr_boundaries: Option<String>,
    /// `mse` or `ms-ssim`.
    #[arg(long)]
    distortion: Option<String>,
    #[arg(long)]
    pair_span: Option<String>,
    /// Frames per training clip for `train-stem`.
    #[arg(long)]
    clip_len: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Inter frame shown by `heatmap`.
    #[arg(long)]
    frame_index: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl Opts {
    fn overrides(&self) -> [(&'static str, &Option<String>); 30] {
        [
            ("input", &self.input),
            ("output", &self.output),
            ("reference", &self.reference),
            ("weights", &self.weights),
            ("stem_weights", &self.stem_weights),
            ("log", &self.log),
            ("width", &self.width),
            ("height", &self.height),
            ("frames", &self.frames),
            ("gop_size", &self.gop_size),
            ("rate_index", &self.rate_index),
            ("use_spm", &self.use_spm),
            ("use_tpm", &self.use_tpm),
            ("use_residual", &self.use_residual),
            ("latent_channels", &self.latent_channels),
            ("hidden_channels", &self.hidden_channels),
            ("stages", &self.stages),
            ("lambdas", &self.lambdas),
            ("iters", &self.iters),
            ("batch_size", &self.batch_size),
            ("patch_h", &self.patch_h),
            ("patch_w", &self.patch_w),
            ("lr_values", &self.lr_values),
            ("lr_boundaries", &self.lr_boundaries),
            ("distortion", &self.distortion),
            ("pair_span", &self.pair_span),
            ("clip_len", &self.clip_len),
            ("checkpoint_every", &self.checkpoint_every),
            ("frame_index", &self.frame_index),
            ("seed", &self.seed),
        ]
    }

    fn resolve(&self) -> Result<CliConfig, commands::Failure> {
        let mut cfg = match &self.config {
            Some(p) if !p.exists() => return Err(commands::Failure::Io(anyhow::anyhow!("config file {} not found", p.display()))),
            Some(p) => load_config(p).map_err(|e| commands::Failure::Usage(format!("{e:#}")))?,
            None => CliConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| commands::Failure::Usage(format!("--{}: {e:#}", key.replace('_', "-"))))?;
            }
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (opts, run): (&Opts, fn(&CliConfig) -> Result<(), commands::Failure>) = match &cli.command {
        Command::TrainImage(o) => (o, commands::train_image),
        Command::TrainStem(o) => (o, commands::train_stem),
        Command::Compress(o) => (o, commands::compress),
        Command::Decompress(o) => (o, commands::decompress),
        Command::Eval(o) => (o, commands::eval),
        Command::Ablate(o) => (o, commands::ablate),
        Command::Heatmap(o) => (o, commands::heatmap),
    };
    match opts.resolve().and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `mfvc help` for usage");
            ExitCode::from(2)
        }
        Err(commands::Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
