use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentshield::cli::{error_json, run_stage, ExperimentConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "latentshield", version, about = "Adversarial image protection experiments on toy latent diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Rerun the stage even if the manifest says it is up to date.
    #[arg(long)]
    force: bool,
    /// Worker threads for per-image parallelism.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Overrides the config's global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData(Common),
    /// Train the autoencoder and denoiser.
    Train(Common),
    /// Run every configured protection method.
    Protect(Common),
    /// Apply the configured mimicry edits to clean and protected images.
    Edit(Common),
    /// Budget-ratio, reflection and the other configured probes.
    Diagnose(Common),
    /// Compute quality and protection metrics.
    Evaluate(Common),
    /// Render the metrics as markdown tables.
    Report(Common),
}

fn run(stage: Stage, c: &Common) -> latentshield::Result<()> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let out = run_stage(
        &cfg,
        stage,
        &RunOptions {
            force: c.force,
            jobs: c.jobs.max(1),
        },
    )?;
    if out.cached {
        println!("{}: cached ({} artifacts)", stage.name(), out.artifacts.len());
    } else {
        println!("{}: done in {:.1}s ({} artifacts)", stage.name(), out.seconds, out.artifacts.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = match &cli.command {
        Command::GenData(c) => (Stage::GenData, c),
        Command::Train(c) => (Stage::Train, c),
        Command::Protect(c) => (Stage::Protect, c),
        Command::Edit(c) => (Stage::Edit, c),
        Command::Diagnose(c) => (Stage::Diagnose, c),
        Command::Evaluate(c) => (Stage::Evaluate, c),
        Command::Report(c) => (Stage::Report, c),
    };
    match run(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            eprintln!("error: {e}");
            ExitCode::from(match e {
                latentshield::Error::Config(_) | latentshield::Error::OutputExists(_) => 2,
                _ => 1,
            })
        }
    }
}
