//! Command-line front end: solve stationary threshold tables, run learning
//! scenarios, sweep algorithm comparisons, and emit plot-ready files.

use anyhow::{bail, Context, Result};
use aoisim::harness::{
    emit_plot_data, run_experiment, solve_stationary, Algorithm, ExperimentConfig, PlotKind,
    Scenario,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "aoisim", about = "Age-of-information scheduling experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configured seeds (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Restrict to these algorithms (comma-separated).
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the stationary problem and write the threshold tables.
    Solve(CommonArgs),
    /// Run one scenario with a single algorithm.
    Run(CommonArgs),
    /// Run the configured multi-algorithm comparison.
    Sweep(CommonArgs),
    /// Re-emit plot-ready files from an output directory.
    PlotData {
        /// What to emit: cumcost-curve or threshold-table.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(algos) = &args.algo {
        for name in algos {
            if Algorithm::parse(name).is_none() {
                bail!("unknown algorithm '{name}'");
            }
        }
        config.algorithms = algos.clone();
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Solve(args) => {
            let config = load_config(&args)?;
            let solutions = solve_stationary(&config, Some(&args.out))?;
            for sol in &solutions {
                println!(
                    "lambda = {}: age-monotone = {}, threshold in K = {}, threshold in p = {}",
                    sol.lambda,
                    sol.monotone_in_age,
                    sol.thresholds.threshold_in_age,
                    sol.thresholds.threshold_in_prob
                );
            }
            println!("threshold tables written to {}", args.out.display());
        }
        Command::Run(args) => {
            let config = load_config(&args)?;
            if config.scenario == Scenario::StationarySingle {
                bail!("use `solve` for the stationary scenario");
            }
            if config.algorithms.len() != 1 {
                bail!("run takes exactly one algorithm; use --algo or `sweep`");
            }
            let out = run_experiment(&config, Some(&args.out))?;
            report(&out, &args.out);
        }
        Command::Sweep(args) => {
            let config = load_config(&args)?;
            if config.scenario == Scenario::StationarySingle {
                bail!("use `solve` for the stationary scenario");
            }
            let out = run_experiment(&config, Some(&args.out))?;
            report(&out, &args.out);
        }
        Command::PlotData { kind, out } => {
            let kind = match kind.as_str() {
                "cumcost-curve" | "cumcost_curve" => PlotKind::CumcostCurve,
                "threshold-table" | "threshold_table" => PlotKind::ThresholdTable,
                other => bail!("unknown plot kind '{other}'"),
            };
            emit_plot_data(&out, kind)?;
            println!("plot data written to {}", out.display());
        }
    }
    Ok(())
}

fn report(out: &aoisim::harness::ExperimentOutput, dir: &std::path::Path) {
    println!("window = {}", out.window);
    for curve in &out.aggregate.curves {
        println!(
            "{}: mean final cumulative cost = {:.2}",
            curve.algorithm,
            curve.mean.last().copied().unwrap_or(0.0)
        );
    }
    println!("traces and aggregate written to {}", dir.display());
}
