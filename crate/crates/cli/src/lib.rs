//! Experiment driver for `structreg`: runs arms over seeds, paired
//! comparisons, grid searches, and dataset generation.

pub mod config;
pub mod experiment;
pub mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use structreg::data::{gen_blobs, gen_two_moons, write_csv};
use thiserror::Error;

use config::{ConfigError, Experiment};
use experiment::{execute_all, plan, Finished};

pub const WORKERS_ENV: &str = "STRUCTREG_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration or usage problems, 3 for aborted runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// `"0,1,4"` or a half-open range `"0..5"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("seeds `{s}`: expected `a,b,c` or `lo..hi`"));
    let seeds: Vec<u64> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        (lo..hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// The environment variable wins over the flag; default is the core count.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV}=`{v}` is not a positive integer")));
    }
    match flag {
        Some(0) => Err(CliError::Usage("--workers must be positive".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub workers: usize,
}

fn load(args: &CommonArgs) -> Result<Experiment, CliError> {
    let mut exp = Experiment::load(&args.config)?;
    if let Some(s) = &args.seeds {
        exp.seeds = s.clone();
    }
    Ok(exp)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

/// Trains every arm at every seed; artifacts go to `<out>/<arm>/seed-<s>/`.
pub fn cmd_run(args: &CommonArgs) -> Result<Vec<Finished>, CliError> {
    let exp = load(args)?;
    let jobs = plan(&exp, &args.out, false, |_| {})?;
    create_out(&args.out)?;
    execute_all(jobs, args.workers)
}

/// Runs all arms, then writes paired differences against the reference arm.
pub fn cmd_compare(args: &CommonArgs, reference: Option<String>) -> Result<Vec<report::ArmComparison>, CliError> {
    let exp = load(args)?;
    let reference = reference
        .or_else(|| exp.reference.clone())
        .or_else(|| exp.arms.iter().find(|a| a.config.w_s_max == 0.0).map(|a| a.name.clone()))
        .ok_or_else(|| CliError::Usage("no reference arm: set `reference` or pass --reference".into()))?;
    if exp.arm(&reference).is_none() {
        return Err(CliError::Usage(format!("no arm named `{reference}`")));
    }
    if exp.arms.len() < 2 {
        return Err(CliError::Usage("compare needs at least two arms".into()));
    }
    let jobs = plan(&exp, &args.out, false, |_| {})?;
    create_out(&args.out)?;
    let runs = execute_all(jobs, args.workers)?;
    let rows = report::compare(&runs, &reference);
    let (q_svg, h_svg) = report::compare_plots(&rows);
    write(&args.out.join("compare.md"), &report::compare_markdown(&rows))?;
    write(
        &args.out.join("compare.json"),
        &(serde_json::to_string_pretty(&rows).expect("serializable") + "\n"),
    )?;
    write(&args.out.join("delta_q.svg"), &q_svg)?;
    write(&args.out.join("delta_entropy.svg"), &h_svg)?;
    Ok(rows)
}

/// Default holdout when the config does not set one.
pub const GRID_VALIDATION_FRAC: f64 = 0.1;

/// Trains every grid point, selects per arm by validation error, writes the table.
pub fn cmd_gridsearch(args: &CommonArgs) -> Result<Vec<report::GridRow>, CliError> {
    let exp = load(args)?;
    if exp.grid.is_empty() {
        return Err(CliError::Usage("gridsearch needs a [grid] table".into()));
    }
    let jobs = plan(&exp, &args.out, true, |c| {
        if c.validation_frac == 0.0 {
            c.validation_frac = GRID_VALIDATION_FRAC;
        }
    })?;
    create_out(&args.out)?;
    let runs = execute_all(jobs, args.workers)?;
    let rows = report::grid_table(&runs);
    write(&args.out.join("gridsearch.md"), &report::grid_markdown(&rows))?;
    write(
        &args.out.join("gridsearch.json"),
        &(serde_json::to_string_pretty(&rows).expect("serializable") + "\n"),
    )?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub dataset: String,
    pub n: usize,
    pub noise: f64,
    pub centers: Option<String>,
    pub sd: f64,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse_centers(s: &str) -> Result<Vec<Vec<f64>>, CliError> {
    s.split(';')
        .map(|c| {
            c.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Usage(format!("centers `{s}`: expected `x,y;x,y`")))
        })
        .collect()
}

/// Writes a synthetic dataset as CSV plus its metadata sidecar.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let ds = match args.dataset.as_str() {
        "two_moons" => gen_two_moons(args.n, args.noise, args.seed),
        "blobs" => {
            let centers = parse_centers(args.centers.as_deref().unwrap_or("-2,0;2,0"))?;
            gen_blobs(args.n, centers.len(), &centers, args.sd, args.seed)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown dataset `{other}` (expected two_moons or blobs)"
            )))
        }
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_csv(&ds, &args.out).map_err(|e| CliError::Runtime(e.to_string()))
}
