use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesionseg::fusion::PipelineMode;
use lesionseg::preprocess::Scale;

mod commands;

/// Two-stage microaneurysm segmentation: hypothesis networks at two scales,
/// patch-wise refinement, pixel-level precision-recall evaluation.
#[derive(Parser, Debug)]
#[command(name = "lesionseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; keys override the selected profile
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the desk-scale profile (small networks, short schedules)
    #[arg(long)]
    pub tiny: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Hgn1x,
    Hgn05x,
    Prn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Triplet plus cross-entropy loss with selective sampling
    Prn,
    /// Cross-entropy only, uniform negatives
    Cls,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrast-enhance every image in a directory
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian sigma is the image width divided by this
        #[arg(long = "sigma-div")]
        sigma_div: Option<f64>,
        /// Also write the half-scale copy (`<name>_05x.png`)
        #[arg(long)]
        half: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the synthetic dataset with its split manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and LESIONSEG_SEED
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write training patches of one stage as 16-bit PNGs plus an index
    Extract {
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
        /// Patches per image
        #[arg(long, default_value_t = 4)]
        per_image: usize,
        /// Which split of the manifest to extract from
        #[arg(long, default_value = "train")]
        subset: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a hypothesis generation network at one scale
    TrainHgn {
        #[arg(long, value_parser = parse_scale)]
        scale: Scale,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the patch refinement network
    TrainPrn {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "prn")]
        variant: Variant,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict a lesion probability map for one image
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Directory with hgn-1x/, hgn-0.5x/, prn/ and cls/ checkpoints
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "prn-geometric", value_parser = parse_mode)]
        mode: PipelineMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Ground-truth mask; colors the overlay by TP/FP/FN
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pixel-level PR evaluation of PMAP1 files against mask PNGs
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate every pipeline mode on the test split
    Ablate {
        #[arg(long)]
        split: PathBuf,
        /// Trained models; when absent every model is trained first and
        /// saved under `<out>/models`
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of modes
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Vec<PipelineMode>,
        /// Also write every map as `<out>/maps/<mode>/<id>.pmap`
        #[arg(long)]
        save_maps: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse().map_err(|e: lesionseg::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<PipelineMode, String> {
    s.parse().map_err(|e: lesionseg::Error| e.to_string())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error[E_USAGE]: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Preprocess { input, out, sigma_div, half, cfg } => commands::preprocess(&input, &out, sigma_div, half, &cfg),
        Command::Synth { out, seed, cfg } => commands::synth(&out, seed, &cfg),
        Command::Extract { split, stage, out, per_image, subset, cfg } => {
            commands::extract(&split, stage, &out, per_image, &subset, &cfg)
        }
        Command::TrainHgn { scale, split, out, cfg } => commands::train_hgn(scale, &split, &out, &cfg),
        Command::TrainPrn { split, out, variant, cfg } => commands::train_prn(&split, &out, variant, &cfg),
        Command::Infer { image, models, mode, out, overlay, mask, cfg } => {
            commands::infer(&image, &models, mode, &out, overlay.as_deref(), mask.as_deref(), &cfg)
        }
        Command::Evaluate { preds, masks, out, curves, cfg } => commands::evaluate(&preds, &masks, &out, curves.as_deref(), &cfg),
        Command::Ablate { split, models, out, modes, save_maps, cfg } => {
            commands::ablate(&split, models.as_deref(), &out, &modes, save_maps, &cfg)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::from(if e.code() == "E_USAGE" { 2 } else { 1 })
        }
    }
}
