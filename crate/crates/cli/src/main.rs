use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaptune::commands::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_gen_data, cmd_lr_find, cmd_train, default_datasets,
    out_dir, parse_list, parse_seeds,
};
use adaptune::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "adaptune",
    about = "Adaptive classifier training: LR estimation, plateau scheduling, SAM, mutual learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config; writes report.json and weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config override, repeatable: --override schedule.max_epochs=50
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Estimate an initial learning rate without a full training run.
    LrFind {
        #[arg(long)]
        config: PathBuf,
        /// fastai | fastai-pretrain | grid | tpe
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate saved weights on the config's validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-sample ranks to this CSV file.
        #[arg(long)]
        ranks_csv: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run baseline and adaptive configs over datasets x seeds.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        adaptive: PathBuf,
        /// Comma-separated dataset URIs (default: bundled synthetic set).
        #[arg(long)]
        datasets: Option<String>,
        /// Comma-separated seeds (default: 1,2,3).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toggle off one pipeline component per arm and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        datasets: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a synthetic dataset to CSV.
    GenData {
        /// e.g. synthetic:gaussian_blobs?C=3&dims=2&n=100&seed=1
        #[arg(long)]
        uri: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &std::path::Path, seed: Option<u64>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(seed) = seed {
        all.push(format!("seed={seed}"));
    }
    RunConfig::load(path, &all)
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out, overrides } => {
            let config = load_config(&config, seed, &overrides)?;
            let artifacts = cmd_train(&config, &out_dir(out))?;
            Ok(!artifacts.diverged())
        }
        Command::LrFind { config, method, seed, out, overrides } => {
            let config = load_config(&config, seed, &overrides)?;
            cmd_lr_find(&config, &method, &out_dir(out))?;
            Ok(true)
        }
        Command::Eval { config, weights, seed, out, ranks_csv, overrides } => {
            let config = load_config(&config, seed, &overrides)?;
            cmd_eval(&config, &weights, &out_dir(out), ranks_csv.as_deref())?;
            Ok(true)
        }
        Command::Compare { baseline, adaptive, datasets, seeds, out } => {
            let baseline = RunConfig::load(&baseline, &[])?;
            let adaptive = RunConfig::load(&adaptive, &[])?;
            let datasets = datasets.map_or_else(default_datasets, |d| parse_list(&d));
            let seeds = seeds.map_or_else(|| Ok(vec![1, 2, 3]), |s| parse_seeds(&s))?;
            cmd_compare(&baseline, &adaptive, &datasets, &seeds, &out_dir(out))?;
            Ok(true)
        }
        Command::Ablate { config, datasets, seeds, out, overrides } => {
            let config = load_config(&config, None, &overrides)?;
            let datasets = datasets.map_or_else(default_datasets, |d| parse_list(&d));
            let seeds = seeds.map_or_else(|| Ok(vec![1, 2, 3]), |s| parse_seeds(&s))?;
            cmd_ablate(&config, &datasets, &seeds, &out_dir(out))?;
            Ok(true)
        }
        Command::GenData { uri, out } => {
            cmd_gen_data(&uri, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("run diverged; see the report for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
