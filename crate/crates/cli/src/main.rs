mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, TrainTask, KEYS};

fn keys_help() -> String {
    let mut s = String::from("Config keys (file lines or --set KEY=VALUE):\n");
    let defaults = ExperimentConfig::default().render();
    for ((key, about), line) in KEYS.iter().zip(defaults.lines()) {
        let default = line.split_once(" = ").map_or("", |(_, v)| v);
        s.push_str(&format!("  {key:<30} {about} [default: {default}]\n"));
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "mdn", version, about = "Mixture density network uncertainty experiments", after_long_help = keys_help())]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable. Applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true, env = "MDN_OUTPUT_DIR", value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "MDN_JOBS", value_name = "N")]
    jobs: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory name under the output directory.
    #[arg(long, global = true, value_name = "NAME")]
    run_name: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a synthetic-scenario MDN or the three driving networks.
    Train {
        /// heavy_noise, absence_of_data, composition or driving.
        #[arg(long)]
        task: Option<String>,
        /// Epochs for the chosen task (train.epochs, or demo.train_epochs for driving).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mixtures: Option<usize>,
    },
    /// Evaluate the uncertainty channels of an MDN over the synthetic domain.
    Grid {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run driving episodes and write metrics and replay logs.
    Drive {
        /// Directory with the trained driving models.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Comma-separated policy names.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated traffic densities.
        #[arg(long)]
        density: Option<String>,
    },
    /// Time single-pass uncertainty against Monte Carlo dropout.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Monte Carlo dropout passes.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        calls: Option<usize>,
    },
    /// Train, evaluate and check every experiment-level acceptance criterion.
    Suite,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)
            .with_context(|| format!("in --set {pair}"))?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut flag = |key, value: Option<String>| {
        if let Some(v) = value {
            flags.push((key, v));
        }
    };
    flag(
        "output_dir",
        cli.output_dir.as_ref().map(|p| p.display().to_string()),
    );
    flag("jobs", cli.jobs.map(|v| v.to_string()));
    flag("seed", cli.seed.map(|v| v.to_string()));
    flag("run_name", cli.run_name.clone());
    match &cli.command {
        Command::Train { task, mixtures, .. } => {
            flag("train.task", task.clone());
            flag("train.mixtures", mixtures.map(|v| v.to_string()));
        }
        Command::Grid { model, resolution } => {
            flag(
                "grid.model",
                model.as_ref().map(|p| p.display().to_string()),
            );
            flag("grid.resolution", resolution.map(|v| v.to_string()));
        }
        Command::Drive {
            models,
            policy,
            seeds,
            density,
        } => {
            flag(
                "drive.models",
                models.as_ref().map(|p| p.display().to_string()),
            );
            flag("drive.policies", policy.clone());
            flag("drive.seeds", seeds.map(|v| v.to_string()));
            flag("drive.densities", density.clone());
        }
        Command::Bench {
            model,
            samples,
            calls,
        } => {
            flag(
                "bench.model",
                model.as_ref().map(|p| p.display().to_string()),
            );
            flag("bench.samples", samples.map(|v| v.to_string()));
            flag("bench.calls", calls.map(|v| v.to_string()));
        }
        Command::Suite => {}
    }
    for (key, value) in flags {
        cfg.set(key, &value)
            .with_context(|| format!("in flag for {key}"))?;
    }
    if let Command::Train {
        epochs: Some(n), ..
    } = &cli.command
    {
        match cfg.train_task {
            TrainTask::Driving => cfg.demo_train_epochs = *n,
            TrainTask::Scenario(_) => cfg.train_epochs = *n,
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .context("starting worker pool")?;
    }
    let name = match &cli.command {
        Command::Train { .. } => "train",
        Command::Grid { .. } => "grid",
        Command::Drive { .. } => "drive",
        Command::Bench { .. } => "bench",
        Command::Suite => "suite",
    };
    let dir = commands::run_dir(&cfg, name)?;
    println!("run directory {}", dir.display());
    match cli.command {
        Command::Train { .. } => commands::train(&cfg, &dir),
        Command::Grid { .. } => commands::grid(&cfg, &dir),
        Command::Drive { .. } => commands::drive(&cfg, &dir),
        Command::Bench { .. } => commands::bench(&cfg, &dir),
        Command::Suite => commands::suite(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
