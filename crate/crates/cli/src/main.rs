use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densemath::data::synth::Tier;
use densemath::inference::BeamConfig;
use densemath_cli::{
    cmd_evaluate, cmd_gradcheck, cmd_recognize, cmd_synth, cmd_train, CliError, RecognizeArgs, RunConfig,
};

#[derive(Parser)]
#[command(name = "densemath", version, about = "Handwritten math recognition with multi-scale attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a configuration key, e.g. `--set max_epochs=10`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Transcribe images with one checkpoint or an ensemble
    Recognize {
        /// Run configuration supplying `members`, `beam`, `max_len` and `size_cap`
        #[arg(long)]
        config: Option<PathBuf>,
        /// Repeat to average several members
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// File listing one image path per line
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        length_normalize: bool,
        #[arg(long)]
        size_cap: Option<usize>,
        /// Write per-step attention heatmaps into this directory
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Score predictions against a reference manifest
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Render a synthetic corpus
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// basic, decimal or structured
        #[arg(long, default_value = "decimal")]
        tier: Tier,
    },
    /// Compare taped gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        coordinates: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            seed,
            output_dir,
        } => {
            if !config.exists() {
                return Err(CliError::MissingPath(config));
            }
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_overrides(&overrides)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let summary = cmd_train(&cfg, |line| println!("{line}"))?;
            eprintln!(
                "best validation WER {:.4} at step {} of {}; checkpoints in {}",
                summary.best_wer,
                summary.best_step,
                summary.steps,
                cfg.output_dir.display()
            );
        }
        Command::Recognize {
            config,
            mut checkpoints,
            images,
            output,
            beam,
            max_len,
            length_normalize,
            size_cap,
            dump_attention,
        } => {
            let cfg = match config {
                Some(path) if !path.exists() => return Err(CliError::MissingPath(path)),
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig {
                    train: densemath::train::TrainConfig {
                        max_len: densemath::model::DEFAULT_MAX_LEN,
                        ..Default::default()
                    },
                    ..RunConfig::default()
                },
            };
            if checkpoints.is_empty() {
                checkpoints = cfg.members.clone();
            }
            let args = RecognizeArgs {
                checkpoints,
                image_list: images,
                output,
                beam: BeamConfig {
                    beam: beam.unwrap_or(cfg.beam),
                    max_len: max_len.unwrap_or(cfg.train.max_len),
                    length_normalize: length_normalize || cfg.length_normalize,
                    capture_attention: false,
                },
                size_cap: size_cap.or(cfg.size_cap),
                attention_dir: dump_attention,
            };
            let predictions = cmd_recognize(&args)?;
            eprintln!("{} predictions written to {}", predictions.len(), args.output.display());
        }
        Command::Evaluate {
            predictions,
            references,
            output_dir,
        } => {
            let report = cmd_evaluate(&predictions, &references, &output_dir)?;
            print!("{}", report.to_key_values());
        }
        Command::Synth {
            output,
            count,
            seed,
            tier,
        } => {
            cmd_synth(&output, count, seed, tier)?;
            eprintln!("{count} {tier} samples written to {}", output.display());
        }
        Command::Gradcheck { seed, coordinates } => {
            let (lines, ok) = cmd_gradcheck(seed, coordinates)?;
            for line in &lines {
                println!("{line}");
            }
            if !ok {
                return Err(CliError::Failed("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
