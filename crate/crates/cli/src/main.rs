use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tissueseg::config::ExperimentConfig;
use tissueseg::data::Split;
use tissueseg_cli::*;

#[derive(Parser)]
#[command(
    name = "tissueseg",
    about = "Wound tissue segmentation: dataset preparation, supervised and \
             semi-supervised training, inference and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pad images/masks onto the canvas, encode palette masks to indexed
    /// form and write the split manifest.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Downscale oversized inputs before padding instead of rejecting
        /// them.
        #[arg(long)]
        resize: bool,
    },
    /// Supervised training on a prepared dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint base whose matching tensors seed the model
        /// (externally obtained pretrained weights).
        #[arg(long)]
        init_weights: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Semi-supervised training from a supervised checkpoint.
    SslTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint base path (without the .bin/.json extension).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of images picked per inner run.
        #[arg(long)]
        pick_count: Option<usize>,
    },
    /// Predict masks and overlays for images.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        opacity: f64,
        /// Input PNG files.
        images: Vec<PathBuf>,
    },
    /// Metrics report over a split with ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented samples of one (image, mask) pair for inspection.
    AugmentPreview {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> tissueseg::Result<()> {
    match Cli::parse().command {
        Command::Prepare {
            input,
            output,
            side,
            seed,
            resize,
        } => {
            let manifest = cmd_prepare(&input, &output, side, seed, resize)?;
            let labeled = manifest.entries.values().filter(|e| e.labeled).count();
            let unlabeled = manifest.entries.len() - labeled;
            println!(
                "prepared {labeled} labeled and {unlabeled} unlabeled images into {}",
                output.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            init_weights,
            seed,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.train.seed = seed;
                cfg.ssl.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
                cfg.train.patience = cfg.train.patience.min(epochs);
            }
            cmd_train(&cfg, &data, &out, init_weights.as_deref())?;
            println!("training finished; artifacts in {}", out.display());
        }
        Command::SslTrain {
            config,
            data,
            checkpoint,
            out,
            seed,
            pick_count,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.train.seed = seed;
                cfg.ssl.seed = seed;
            }
            if let Some(n) = pick_count {
                cfg.ssl.pick_count = n;
            }
            cmd_ssl_train(&cfg, &data, &checkpoint, &out)?;
            println!(
                "semi-supervised training finished; artifacts in {}",
                out.display()
            );
        }
        Command::Infer {
            config,
            checkpoint,
            out,
            opacity,
            images,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_infer(&cfg, &checkpoint, &images, &out, opacity)?;
            println!("wrote {} predictions to {}", images.len(), out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cmd_eval(&cfg, &checkpoint, &data, split.into(), &out)?;
            println!(
                "overall micro: precision {:.4} recall {:.4} dsc {:.4} iou {:.4}",
                report.overall_micro.precision,
                report.overall_micro.recall,
                report.overall_micro.dsc,
                report.overall_micro.iou
            );
        }
        Command::AugmentPreview {
            config,
            image,
            mask,
            count,
            seed,
            out,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            cmd_augment_preview(&cfg, &image, &mask, count, seed, &out)?;
            println!("wrote {count} augmented samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
