use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vaelab_cli::config::{ExperimentConfig, ExperimentKind};
use vaelab_cli::records::{export_results, records_from_csv, sidecar_path};
use vaelab_cli::runner::{generate_dataset, run_experiment};
use vaelab_cli::verify::run_suite;

#[derive(Parser)]
#[command(
    name = "vaelab",
    about = "Gaussian VAEs on synthetic nonlinear-ICA data: precision sweeps, contrast/likelihood gaps, identifiability"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigSource {
    /// Experiment preset to run.
    #[arg(long, value_enum, conflicts_with = "config")]
    experiment: Option<ExperimentKind>,
    /// Full experiment config (TOML); overrides the preset entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-size protocol values instead of the desk-scale defaults.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match (&self.experiment, &self.config) {
            (_, Some(path)) => ExperimentConfig::from_path(path)?,
            (Some(kind), None) => ExperimentConfig::preset(*kind, self.paper_scale),
            (None, None) => anyhow::bail!("pass either --experiment or --config"),
        };
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ground-truth dataset of an experiment's first cell and
    /// write it as a columnar text file.
    GenData {
        #[command(flatten)]
        source: ConfigSource,
        /// Output path for the dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment sweep and export records as CSV plus a JSON
    /// metadata sidecar.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for independent cells (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Re-export an existing records CSV (validates and rewrites it with a
    /// fresh sidecar).
    Export {
        /// Existing records CSV.
        #[arg(long)]
        records: PathBuf,
        /// Destination CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Run the acceptance suite and print one pass/fail line per criterion.
    Verify {
        /// Only the fast property-based criteria (1-3, 7).
        #[arg(long, default_value_t = false)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let summary = serde_json::json!({ "error": e.to_string() });
            eprintln!("{summary}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData { source, out } => {
            let config = source.resolve()?;
            let dataset = generate_dataset(&config)?;
            vaelab::mixing::save_dataset(&dataset, &out)?;
            println!(
                "wrote {} samples (dim {}) to {}",
                dataset.len(),
                dataset.dim(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { source, out, workers } => {
            let config = source.resolve()?;
            let started = std::time::Instant::now();
            let (records, clocks) = run_experiment(&config, workers)?;
            export_results(&records, &out, &config, &clocks)?;
            let failures = records.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} records ({} failed cells) in {:.1}s -> {} (+ {})",
                records.len(),
                failures,
                started.elapsed().as_secs_f64(),
                out.display(),
                sidecar_path(&out).display()
            );
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Export { records, out, source } => {
            let config = source.resolve()?;
            let bytes = std::fs::read(&records)?;
            let parsed = records_from_csv(&bytes)?;
            export_results(&parsed, &out, &config, &[])?;
            println!("re-exported {} records -> {}", parsed.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { quick } => {
            let outcomes = run_suite(quick);
            let failed = outcomes.iter().filter(|o| !o.pass).count();
            if failed == 0 {
                println!("all {} criteria passed", outcomes.len());
                Ok(ExitCode::SUCCESS)
            } else {
                let summary = serde_json::json!({
                    "error": "acceptance criteria failed",
                    "failed": outcomes
                        .iter()
                        .filter(|o| !o.pass)
                        .map(|o| format!("criterion {} [{}]: {}", o.id, o.name, o.details))
                        .collect::<Vec<_>>(),
                });
                eprintln!("{summary}");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
