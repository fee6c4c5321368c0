//! Expanding an experiment into runs and executing them on a worker pool.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use structreg::trainer::{run, RunConfig, RunOptions, RunResult, TrainError};
use toml::Value;

use crate::config::{point_label, ConfigError, Experiment};
use crate::CliError;

/// One training run: an arm at a grid point and seed.
#[derive(Clone, Debug)]
pub struct Job {
    pub arm: String,
    pub point: Vec<(String, Value)>,
    pub seed: u64,
    pub config: RunConfig,
    pub dir: PathBuf,
}

#[derive(Debug)]
pub struct Finished {
    pub job: Job,
    pub result: RunResult,
}

/// Builds and validates all jobs; `grid` selects whether grid points are expanded.
pub fn plan(
    exp: &Experiment,
    out: &Path,
    grid: bool,
    adjust: impl Fn(&mut RunConfig),
) -> Result<Vec<Job>, ConfigError> {
    let points = if grid { exp.grid_points() } else { vec![vec![]] };
    let mut jobs = Vec::new();
    for arm in &exp.arms {
        for point in &points {
            for &seed in &exp.seeds {
                let mut config = exp.resolve(arm, point, seed)?;
                adjust(&mut config);
                config.validate().map_err(|e| exp.locate(arm, e))?;
                let mut dir = out.join(&arm.name);
                if grid {
                    dir = dir.join(point_label(point));
                }
                dir = dir.join(format!("seed-{seed}"));
                jobs.push(Job {
                    arm: arm.name.clone(),
                    point: point.clone(),
                    seed,
                    config,
                    dir,
                });
            }
        }
    }
    Ok(jobs)
}

fn execute(job: Job) -> Result<Finished, (Job, TrainError)> {
    let options = RunOptions {
        run_dir: Some(job.dir.clone()),
    };
    let result = match run(job.config.clone(), &options) {
        Ok(r) => r,
        Err(e) => return Err((job, e)),
    };
    if let Err(e) = result.write_artifacts(&job.dir) {
        return Err((job, e));
    }
    eprintln!(
        "finished {} seed {} ({} steps, test error {:.4})",
        job.dir.display(),
        job.seed,
        result.summary.total_batches,
        result.summary.final_test_err
    );
    Ok(Finished { job, result })
}

/// Runs every job on `workers` threads; results keep job order.
pub fn execute_all(jobs: Vec<Job>, workers: usize) -> Result<Vec<Finished>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<_> = pool.install(|| jobs.into_par_iter().map(execute).collect());
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(f) => done.push(f),
            Err((job, e)) => failures.push(format!("{}: {e}", job.dir.display())),
        }
    }
    if failures.is_empty() {
        Ok(done)
    } else {
        Err(CliError::Runtime(failures.join("\n")))
    }
}
