use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ppfer_core::pipeline::parse_stages;
use ppfer_core::{Pipeline, PipelineConfig, PpError};

#[derive(Parser)]
#[command(name = "ppfer", version, about = "Face anonymization for video FER with rule-based privacy validation")]
struct Cli {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run several stages in order.
    Run {
        /// Comma-separated stage list, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Print the effective configuration.
    ShowConfig,
    /// Render the synthetic video and still datasets.
    Synth,
    /// Assign per-video tracking IDs.
    Track,
    /// Sample triplet batches from the tracks.
    Priors,
    /// Pre-train and train the anonymizer.
    #[command(name = "train-pp")]
    TrainPp,
    /// Anonymize crops (and blur them for the baseline).
    Anonymize,
    /// Train the expression classifier and the denoiser.
    #[command(name = "train-denoise")]
    TrainDenoise,
    /// Denoise anonymized crops.
    Denoise,
    /// Train and evaluate video FER with and without the denoiser.
    #[command(name = "train-fer")]
    TrainFer,
    /// Train recovery attacks and write recovered crops.
    #[command(name = "train-recovery")]
    TrainRecovery,
    /// Generate comparison cases and compute privacy statistics.
    Validate,
    /// Combine privacy and FER results into one report.
    Report,
}

impl Command {
    fn stages(&self) -> Option<String> {
        let s = match self {
            Command::Run { stages } => return Some(stages.clone()),
            Command::ShowConfig => return None,
            Command::Synth => "synth",
            Command::Track => "track",
            Command::Priors => "priors",
            Command::TrainPp => "train-pp",
            Command::Anonymize => "anonymize",
            Command::TrainDenoise => "train-denoise",
            Command::Denoise => "denoise",
            Command::TrainFer => "train-fer",
            Command::TrainRecovery => "train-recovery",
            Command::Validate => "validate",
            Command::Report => "report",
        };
        Some(s.to_string())
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command.stages() {
        None => print!("{}", cfg.to_text()),
        Some(list) => {
            let stages = parse_stages(&list)?;
            let pipeline = Pipeline::new(cfg)?;
            for s in &stages {
                let start = Instant::now();
                pipeline.run_stage(s)?;
                eprintln!("{s}: done in {:.1}s", start.elapsed().as_secs_f64());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<PpError>() {
                Some(PpError::Usage(_)) => ExitCode::from(2),
                Some(PpError::Dependency { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
