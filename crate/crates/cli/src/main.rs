use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use structreg_cli::{
    cmd_compare, cmd_gen_data, cmd_gridsearch, cmd_run, parse_seeds, resolve_workers, CliError,
    CommonArgs, GenDataArgs,
};

#[derive(Parser)]
#[command(name = "structreg", version, about = "Semi-supervised structural regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds as `a,b,c` or `lo..hi`; overrides the file.
    #[arg(long)]
    seeds: Option<String>,
    /// Parallel runs (STRUCTREG_WORKERS takes precedence).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every arm at every seed.
    Run(Common),
    /// Train every arm and report paired differences against a reference arm.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<String>,
    },
    /// Train every grid point and select per arm by validation error.
    Gridsearch(Common),
    /// Write a synthetic dataset to CSV.
    GenData {
        #[arg(long, default_value = "two_moons")]
        dataset: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Two-moons coordinate noise.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Blob centers as `x,y;x,y`.
        #[arg(long)]
        centers: Option<String>,
        /// Blob standard deviation.
        #[arg(long, default_value_t = 0.5)]
        sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn common(c: Common) -> Result<CommonArgs, CliError> {
    Ok(CommonArgs {
        config: c.config,
        out: c.out,
        seeds: c.seeds.as_deref().map(parse_seeds).transpose()?,
        workers: resolve_workers(c.workers)?,
    })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let runs = cmd_run(&common(c)?)?;
            for f in runs {
                println!(
                    "{}\tseed {}\ttest_err {}\tentropy {}\tepsilon {}",
                    f.job.arm,
                    f.job.seed,
                    f.result.summary.final_test_err,
                    f.result.summary.final_mean_entropy,
                    f.result.summary.final_epsilon
                );
            }
        }
        Command::Compare { common: c, reference } => {
            let rows = cmd_compare(&common(c)?, reference)?;
            print!("{}", structreg_cli::report::compare_markdown(&rows));
        }
        Command::Gridsearch(c) => {
            let rows = cmd_gridsearch(&common(c)?)?;
            print!("{}", structreg_cli::report::grid_markdown(&rows));
        }
        Command::GenData {
            dataset,
            n,
            noise,
            centers,
            sd,
            seed,
            out,
        } => cmd_gen_data(&GenDataArgs {
            dataset,
            n,
            noise,
            centers,
            sd,
            seed,
            out,
        })?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
