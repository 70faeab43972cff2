use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use slamon::harness::{aggregate, read_results_csv, write_aggregate_csv, write_outputs, AggregateRow};
use slamon::{load_scenario, run_matrix, StrategyKind};

/// Simulate and compare measurement-session activation strategies.
#[derive(Debug, Parser)]
#[command(name = "slamon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (strategy, seed) pair of a scenario and write the results.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Strategies to run, overriding the scenario's list. Repeatable or
        /// comma separated: random, local, local_remote, virtual.
        #[arg(long = "strategy", value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
        /// Seeds, overriding the scenario's list: `0..30`, `0..=29` or `1,2,3`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
        /// Directory for results.csv, aggregate.csv, summary.json and traces.
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
        /// Record the message trace of every run.
        #[arg(long)]
        trace: bool,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Re-aggregate one or more results.csv files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Write the aggregate table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let s = s.trim();
    let num = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("bad seed {x:?}: {e}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("seed range {s:?} is empty"));
    }
    Ok(Seeds(seeds))
}

fn print_table(rows: &[AggregateRow], mut out: impl Write) -> io::Result<()> {
    writeln!(
        out,
        "{:<13} {:>5} {:>17} {:>17} {:>8} {:>12}",
        "strategy", "runs", "detection_ratio", "detection_lag", "covered", "messages"
    )?;
    let opt = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
        (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "-".into(),
    };
    for r in rows {
        writeln!(
            out,
            "{:<13} {:>5} {:>17} {:>17} {:>8.3} {:>12.0}",
            r.strategy.name(),
            r.runs,
            format!("{:.3} ± {:.3}", r.detection_ratio_mean, r.detection_ratio_sd),
            opt(r.mean_detection_lag_mean, r.mean_detection_lag_sd),
            r.distinct_destinations_covered_per_device_mean,
            r.messages_total_mean,
        )?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            strategies,
            seeds,
            out_dir,
            trace,
            jobs,
        } => {
            let mut config = load_scenario(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if !strategies.is_empty() {
                config.strategies = strategies;
            }
            if let Some(Seeds(seeds)) = seeds {
                config.seeds = seeds;
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if jobs == 0 {
                bail!("--jobs must be at least 1");
            }
            let result = run_matrix(&config, jobs, trace)?;
            let written = write_outputs(&result, &out_dir)
                .with_context(|| format!("writing results to {}", out_dir.display()))?;
            print_table(&result.aggregates, io::stdout().lock())?;
            eprintln!("wrote {} files to {}", written.len(), out_dir.display());
        }
        Command::Validate { scenario } => {
            let config = load_scenario(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            let s = &config.scenario;
            let strategies: Vec<_> = config.strategies.iter().map(|k| k.name()).collect();
            println!(
                "ok: {} devices, {} paths, {} groups, {} rounds, strategies [{}], {} seeds",
                s.devices.len(),
                s.paths.len(),
                s.groups.len(),
                s.rounds,
                strategies.join(", "),
                config.seeds.len()
            );
        }
        Command::Report { results, out } => {
            let mut rows = Vec::new();
            for path in &results {
                rows.extend(read_results_csv(path).with_context(|| format!("reading {}", path.display()))?);
            }
            let agg = aggregate(&rows);
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_aggregate_csv(&agg, file)?;
                    print_table(&agg, io::stdout().lock())?;
                }
                None => write_aggregate_csv(&agg, io::stdout().lock())?,
            }
        }
    }
    Ok(())
}
