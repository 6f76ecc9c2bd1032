//! `defectgen` — synthetic-defect image generation and representation
//! learning from the command line.
//!
//! Stages: `gen-data` builds the labeled dataset; `train-ddpm` fits a
//! per-class denoising diffusion model; `sample` draws images from it;
//! `train-moco` runs momentum-contrast pretraining; `probe` fits a linear
//! classifier on the frozen encoder; `eval` scores the held-out split and
//! a sample batch.
//!
//! Exit codes: 0 on success, 2 for configuration/usage/file problems,
//! 3 for numeric failures inside a computation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use defectgen_core::config::RunConfig;
use defectgen_core::data::DefectClass;
use defectgen_core::error::Error;
use defectgen_core::pipeline::{
    self, ddpm_checkpoint_path, moco_checkpoint_path, probe_checkpoint_path,
};

#[derive(Parser)]
#[command(
    name = "defectgen",
    version,
    about = "Desk-scale diffusion and contrastive pretraining on synthetic surface defects"
)]
struct Cli {
    /// Config file of `key=value` lines (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the dataset directory from the config.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled defect dataset into the data directory.
    GenData,
    /// Train the denoising diffusion model for one defect class.
    TrainDdpm {
        /// Defect class to model: corrosion, dent, scratch, or smooth.
        #[arg(long)]
        class: String,
        /// Cap on optimizer steps this invocation (resume later to finish).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw images from a trained denoiser under both update rules.
    Sample {
        /// Denoiser checkpoint (default: <out>/ddpm_<class>.dft via --class).
        #[arg(long, conflicts_with = "class")]
        checkpoint: Option<PathBuf>,
        /// Class whose default checkpoint to sample from.
        #[arg(long)]
        class: Option<String>,
        /// Number of images to draw.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Run momentum-contrast pretraining of the encoder pair.
    TrainMoco {
        /// Cap on optimizer steps this invocation (resume later to finish).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fit a linear probe on frozen encoder features.
    Probe {
        /// Encoder checkpoint (default: <out>/moco.dft).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the held-out split and a sample batch; write metric reports.
    Eval {
        /// Encoder checkpoint (default: <out>/moco.dft).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe checkpoint (default: <out>/probe.dft).
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Sample batch to score (default: <out>/samples/samples.dft).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn parse_class(name: &str) -> Result<DefectClass, Error> {
    DefectClass::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| {
            Error::param(format!(
                "unknown class '{name}'; expected corrosion, dent, scratch, or smooth"
            ))
        })
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(data) = cli.data {
        cfg.data_dir = Some(data);
    }
    if let Some(out) = cli.out {
        cfg.out_dir = Some(out);
    }

    match cli.command {
        Command::GenData => {
            pipeline::run_gen_data(&cfg, &cfg.data_dir()?.to_path_buf())?;
        }
        Command::TrainDdpm { class, steps } => {
            let class = parse_class(&class)?;
            let data = cfg.data_dir()?.to_path_buf();
            let out = cfg.out_dir()?.to_path_buf();
            pipeline::run_train_ddpm(&cfg, class, &data, &out, steps)?;
        }
        Command::Sample { checkpoint, class, n } => {
            let out = cfg.out_dir()?.to_path_buf();
            let ckpt = match (checkpoint, class) {
                (Some(path), _) => path,
                (None, Some(name)) => ddpm_checkpoint_path(&out, parse_class(&name)?),
                (None, None) => {
                    return Err(Error::param("sample needs --checkpoint or --class"));
                }
            };
            pipeline::run_sample(&cfg, &ckpt, n, &out)?;
        }
        Command::TrainMoco { steps } => {
            let data = cfg.data_dir()?.to_path_buf();
            let out = cfg.out_dir()?.to_path_buf();
            pipeline::run_train_moco(&cfg, &data, &out, steps)?;
        }
        Command::Probe { checkpoint } => {
            let data = cfg.data_dir()?.to_path_buf();
            let out = cfg.out_dir()?.to_path_buf();
            let ckpt = checkpoint.unwrap_or_else(|| moco_checkpoint_path(&out));
            pipeline::run_probe(&cfg, &ckpt, &data, &out)?;
        }
        Command::Eval { checkpoint, probe, samples } => {
            let data = cfg.data_dir()?.to_path_buf();
            let out = cfg.out_dir()?.to_path_buf();
            let encoder = checkpoint.unwrap_or_else(|| moco_checkpoint_path(&out));
            let probe = probe.unwrap_or_else(|| probe_checkpoint_path(&out));
            let samples = samples.unwrap_or_else(|| out.join("samples").join("samples.dft"));
            pipeline::run_eval(&cfg, &encoder, &probe, &samples, &data, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric { .. } | Error::Shape { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
