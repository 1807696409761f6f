use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vcil::config::ExperimentConfig;
use vcil::dataset::{export_frame_directory, generate_synthetic_dataset, SyntheticSpec};
use vcil::protocol::{run_incremental_experiment, ExperimentData};
use vcil::report::{summarize, summary_text, write_run_artifacts, write_summary};

mod compare;
mod plot;

/// Class-incremental video classification experiments.
#[derive(Parser)]
#[command(name = "vcil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and report every invalid field.
    Validate { config: PathBuf },
    /// Run every seed of a config and write per-seed results plus a summary.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds to run; overrides `seeds` from the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Side-by-side final metrics and accuracy curves of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Where the comparison table and plots go.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Write the synthetic dataset of a config as a frame directory.
    ExportDataset { config: PathBuf, dir: PathBuf },
}

/// Exit code for a config that fails validation.
const INVALID_CONFIG: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, out, seeds } => run(&config, out, seeds),
        Command::Compare { dirs, out } => compare::compare(&dirs, &out),
        Command::ExportDataset { config, dir } => export_dataset(&config, &dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Loads a config and prints field-level problems. `None` means invalid.
fn load_checked(path: &Path) -> Result<Option<ExperimentConfig>> {
    let config = ExperimentConfig::load(path)?;
    let issues = config.issues();
    if issues.is_empty() {
        return Ok(Some(config));
    }
    eprintln!("{}: invalid config", path.display());
    for issue in issues {
        eprintln!("  {issue}");
    }
    Ok(None)
}

fn validate(path: &Path) -> Result<ExitCode> {
    match load_checked(path)? {
        Some(_) => {
            println!("{}: ok", path.display());
            Ok(ExitCode::SUCCESS)
        }
        None => Ok(ExitCode::from(INVALID_CONFIG)),
    }
}

fn run(path: &Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<ExitCode> {
    let Some(mut config) = load_checked(path)? else {
        return Ok(ExitCode::from(INVALID_CONFIG));
    };
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        config.seeds = seeds;
    }
    let out = out.unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), config.to_toml_string())
        .with_context(|| format!("writing {}", out.join("config.toml").display()))?;

    let data = ExperimentData::from_config(&config)?;
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let dir = out.join(format!("seed_{seed}"));
        log::info!("seed {seed} -> {}", dir.display());
        let report = run_incremental_experiment(&config, &data, seed, Some(&dir))?;
        write_run_artifacts(&report, &dir)?;
        reports.push(report);
    }
    let label = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let summary = summarize(&label, &reports)?;
    write_summary(&summary, &out)?;
    plot::accuracy_curves(&[&summary], &out.join("accuracy.png"))?;
    print!("{}", summary_text(&[&summary]));
    Ok(ExitCode::SUCCESS)
}

fn export_dataset(path: &Path, dir: &Path) -> Result<ExitCode> {
    let Some(config) = load_checked(path)? else {
        return Ok(ExitCode::from(INVALID_CONFIG));
    };
    if config.data_root.is_some() {
        bail!("export-dataset writes the synthetic dataset; remove data_root from the config");
    }
    let spec = SyntheticSpec {
        num_classes: config.num_classes,
        samples_per_class: config.train_per_class + config.test_per_class,
        frames: config.frames,
        channels: config.channels,
        height: config.height,
        width: config.width,
        seed: config.dataset_seed,
    };
    let sequences = generate_synthetic_dataset(&spec)?;
    export_frame_directory(&sequences, dir)?;
    println!("wrote {} videos to {}", sequences.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}
