mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use boxprompt::data::Split;
use boxprompt::ErrorKind;
use clap::{Parser, Subcommand};

use config::{Overrides, Settings};

#[derive(Parser)]
#[command(
    name = "boxprompt",
    version,
    about = "Learn prompt embeddings for a frozen segmenter from tight boxes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipse dataset with masks, boxes and splits.
    Synth {
        #[arg(long)]
        n: usize,
        /// Square canvas side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Standardize intensities and geometry into a new dataset.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Encode every image once and store the embeddings under --cache.
    CacheEmbeddings {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the cache statistics here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train a prompt module on k train entries of the manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score a checkpoint on one split of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = commands::parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Write the probability map and binary mask for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Nine runs over three subset seeds and three init seeds.
    Experiment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score the backbone prompted with each image's tight box.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = commands::parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, size, out, opts } => {
            let path = commands::synth(n, size, &out, &Settings::resolve(&opts)?)?;
            println!("{}", path.display());
        }
        Command::Preprocess { manifest, out, opts } => {
            let path = commands::preprocess(&manifest, &out, &Settings::resolve(&opts)?)?;
            println!("{}", path.display());
        }
        Command::CacheEmbeddings { manifest, out, opts } => {
            let stats = commands::cache_embeddings(&manifest, &Settings::resolve(&opts)?)?;
            let line = serde_json::to_string(&stats)?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| boxprompt::Error::io(&out, e))?;
                let p = out.join("cache_stats.json");
                std::fs::write(&p, &line).map_err(|e| boxprompt::Error::io(&p, e))?;
            }
            println!("{line}");
        }
        Command::Train { manifest, out, opts } => {
            let path = commands::train_cmd(&manifest, &out, &Settings::resolve(&opts)?)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
            opts,
        } => {
            let (path, report) =
                commands::evaluate_cmd(&checkpoint, &manifest, split, &out, &Settings::resolve(&opts)?)?;
            println!(
                "{} mean dice {:.4} (std {:.4}, n {})",
                path.display(),
                report.mean,
                report.std,
                report.n
            );
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            opts,
        } => {
            let (prob, mask) = commands::predict(&checkpoint, &image, &out, &Settings::resolve(&opts)?)?;
            println!("{}\n{}", prob.display(), mask.display());
        }
        Command::Experiment { manifest, out, opts } => {
            let path = commands::experiment(&manifest, &out, &Settings::resolve(&opts)?)?;
            println!("{}", path.display());
        }
        Command::Baseline {
            manifest,
            split,
            out,
            opts,
        } => {
            let (path, report) = commands::baseline(&manifest, split, &out, &Settings::resolve(&opts)?)?;
            println!(
                "{} mean dice {:.4} (std {:.4}, n {})",
                path.display(),
                report.mean,
                report.std,
                report.n
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<boxprompt::Error>().map(boxprompt::Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::BackboneUnavailable) => 4,
        Some(ErrorKind::Internal) | None => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
