//! Command-line driver for the experiment pipeline.
//!
//! Each subcommand runs one pipeline stage against a run directory; stages
//! communicate through the artifacts and manifest in that directory, so a
//! sequence like
//!
//! ```text
//! pacbayes sample  --preset binary-2k --out runs/demo
//! pacbayes ti      --out runs/demo
//! pacbayes mfvi    --out runs/demo
//! pacbayes diagnose --out runs/demo
//! pacbayes certify --out runs/demo
//! pacbayes report  --out runs/demo
//! ```
//!
//! is resumable at any point and `pacbayes verify --out runs/demo` checks
//! that the manifest matches what is on disk.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pacbayes::pipeline::{config::Stage, manifest, ExperimentConfig, ResolvedExperiment};

#[derive(Parser)]
#[command(
    name = "pacbayes",
    about = "PAC-Bayes risk certificates via tempered posterior sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment configuration (JSON). Defaults to <out>/config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: paper-defaults | binary-2k | conjugate-oracle | rosenbrock-demo.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread count (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate step sizes and run the chains at every tempering level.
    Sample(StageArgs),
    /// Integrate the tempering curve into the KL estimate.
    Ti(StageArgs),
    /// Train the variational baseline and sample its losses.
    Mfvi(StageArgs),
    /// Convergence and calibration diagnostics.
    Diagnose(StageArgs),
    /// Assemble the risk certificates.
    Certify(StageArgs),
    /// Final tables and the bound-violation audit.
    Report(StageArgs),
    /// Check the manifest against the run directory contents.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = if let Some(path) = &args.config {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading configuration {}", path.display()))?;
        serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing configuration {}", path.display()))?
    } else if let Some(name) = &args.preset {
        match ExperimentConfig::preset(name) {
            Some(cfg) => cfg,
            None => bail!(
                "unknown preset '{name}' (expected paper-defaults, binary-2k, \
                 conjugate-oracle, or rosenbrock-demo)"
            ),
        }
    } else {
        let path = args.out.join("config.json");
        if !path.exists() {
            bail!(
                "no configuration: pass --config or --preset, or point --out at a \
                 directory holding config.json"
            );
        }
        let bytes = std::fs::read(&path)?;
        serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing configuration {}", path.display()))?
    };
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    Ok(config)
}

fn run_stage(args: &StageArgs, stage: Stage) -> Result<()> {
    let config = load_config(args)?;
    let exp = ResolvedExperiment::resolve(config, &args.out)?;
    let run = || -> Result<()> {
        pacbayes::pipeline::run_stage(&exp, stage)?;
        Ok(())
    };
    match args.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("building the worker pool")?
            .install(run),
        None => run(),
    }?;
    eprintln!(
        "stage '{}' complete; artifacts in {}",
        stage.name(),
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Sample(a) => run_stage(&a, Stage::Sample),
        Command::Ti(a) => run_stage(&a, Stage::Ti),
        Command::Mfvi(a) => run_stage(&a, Stage::Mfvi),
        Command::Diagnose(a) => run_stage(&a, Stage::Diagnose),
        Command::Certify(a) => run_stage(&a, Stage::Certify),
        Command::Report(a) => run_stage(&a, Stage::Report),
        Command::Verify { out } => {
            let report = manifest::verify(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.ok() {
                eprintln!("verify: ok");
                Ok(())
            } else {
                bail!(
                    "verify failed: {} missing artifacts",
                    report.missing_artifacts.len()
                );
            }
        }
    }
}
