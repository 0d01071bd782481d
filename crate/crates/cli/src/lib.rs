//! Experiment runner: dataset generation, training, evaluation, causality
//! extraction and figures, all driven by one flat JSON config.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gflow_core::data::Split;

use crate::config::{Benchmark, ExperimentConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "gflow", version, about = "Sparse neural ODE/DDE training and causal discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (JSON). Defaults to `<out>/config.json`, then to
    /// the Lorenz-96 defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or ingest) the dataset.
    Generate(Common),
    /// Train `n_repeats` models.
    Train {
        #[command(flatten)]
        common: Common,
        /// Hyperparameter grid such as `alpha=0.1,0.01;rho=0.1,0.01`,
        /// selected by validation MSE.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Forecast a split with every trained repeat.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Causality matrices, ensemble statistics and lag tables.
    Causality(Common),
    /// SVG figures from evaluated runs.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluated output directories (default: `--out`).
        inputs: Vec<PathBuf>,
    },
}

/// Config from `--config`, else `<out>/config.json`, else defaults, with
/// `--set`, `--seed` and `--repeats` applied on top.
pub fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let saved = c.out.join(commands::CONFIG_FILE);
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if saved.exists() => ExperimentConfig::load(&saved)?,
        None => ExperimentConfig::defaults(Benchmark::Lorenz96),
    };
    let mut sets = c.set.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(r) = c.repeats {
        sets.push(format!("n_repeats={r}"));
    }
    base.with_overrides(&sets)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: gflow_core::Error| CliError::config(e.to_string()))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GFLOW_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::config(format!("GFLOW_THREADS={v:?} is not a count")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    pool.install(|| match cli.command {
        Command::Generate(c) => commands::generate(&resolve_config(&c)?, &c.out).map(drop),
        Command::Train { common, grid } => {
            let cfg = resolve_config(&common)?;
            match grid {
                Some(g) => commands::train_grid(&cfg, &g, &common.out).map(drop),
                None => commands::train(&cfg, &common.out).map(drop),
            }
        }
        Command::Evaluate { common, split } => {
            let cfg = resolve_config(&common)?;
            commands::evaluate_cmd(&cfg, &common.out, parse_split(&split)?).map(drop)
        }
        Command::Causality(c) => commands::causality_cmd(&c.out).map(drop),
        Command::Plot { common, split, inputs } => {
            let inputs = if inputs.is_empty() { vec![common.out.clone()] } else { inputs };
            commands::plot_cmd(&inputs, &common.out, parse_split(&split)?).map(drop)
        }
    })
}
