//! Benchmark CLI for the sliding-window visual-inertial estimator.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use vio_cli::{
    compare_cmd, metrics_cmd, parse_method, parse_seeds, run_cmd, simulate_cmd, RunOptions,
    TraceKind,
};

#[derive(Parser)]
#[command(
    name = "vio",
    about = "Synthetic visual-inertial estimation benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scenario and write its raw measurement streams
    Simulate {
        /// Preset name or scenario TOML file
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimation method over a scenario
    Run {
        /// Preset name or scenario TOML file
        scenario: String,
        /// plain_ls, huber, atls, atls_bcc, or atls_bcc_ssr
        #[arg(long)]
        method: String,
        /// Comma-separated seed list
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated diagnostics to write: weights, bias, bcc
        #[arg(long)]
        trace: Option<String>,
    },
    /// Merge several run directories into one comparison table
    Compare {
        /// Run directories (each containing a metrics.csv)
        dirs: Vec<PathBuf>,
        /// Write the merged rows to this CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute trajectory metrics for a finished run directory
    Metrics { dir: PathBuf },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Simulate { scenario, seed, out } => {
            let summary = simulate_cmd(&scenario, seed, &out)?;
            println!("{summary}");
        }
        Cmd::Run {
            scenario,
            method,
            seeds,
            out,
            trace,
        } => {
            let opts = RunOptions {
                scenario,
                method: parse_method(&method)?,
                seeds: parse_seeds(&seeds)?,
                out,
                traces: trace
                    .as_deref()
                    .map(TraceKind::parse_list)
                    .transpose()?
                    .unwrap_or_default(),
            };
            let rows = run_cmd(&opts)?;
            for r in &rows {
                println!(
                    "{} {} seed {}: ate_rmse {:.5} m, rte_rmse {:.5} m, {} recoveries, \
                     {:.2} ms/solve",
                    r.method, r.scenario, r.seed, r.ate_rmse, r.rte_rmse, r.recovery_count,
                    r.mean_ba_ms
                );
            }
        }
        Cmd::Compare { dirs, out } => {
            let table = compare_cmd(&dirs, out.as_deref())?;
            print!("{table}");
        }
        Cmd::Metrics { dir } => {
            let report = metrics_cmd(&dir)?;
            print!("{report}");
        }
    }
    Ok(())
}
