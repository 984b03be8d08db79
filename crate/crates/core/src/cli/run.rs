use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{resolve_out, write_atomic, CliConfig, Exit, Grid};
use crate::bench::{run_experiment, ExperimentSpec, RunRecord, RunSidecar};
use crate::error::{Error, Result};

/// Command-line overrides shared by `train` and `sweep`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// File stem encoding the swept coordinates of a run.
pub fn cell_name(spec: &ExperimentSpec) -> String {
    format!(
        "{}_eta{}_alpha{}_{}_kappa{}_seed{}",
        spec.optimizer,
        spec.train.eta,
        spec.alpha,
        spec.train.order.as_str(),
        spec.kappa,
        spec.seed
    )
}

fn csv_path(dir: &Path, cell: &str) -> PathBuf {
    dir.join(format!("{cell}.csv"))
}

fn sidecar_path(dir: &Path, cell: &str) -> PathBuf {
    dir.join(format!("{cell}.run.json"))
}

/// Runs one experiment and writes its CSV, then its sidecar. A diverged run
/// still writes both, with the partial record.
fn run_cell(spec: &ExperimentSpec, dir: &Path) -> Result<RunSidecar> {
    let cell = cell_name(spec);
    let record = match run_experiment(spec) {
        Ok(record) => record,
        Err(Error::DivergenceDetected { partial, .. }) => *partial,
        Err(e) => return Err(e),
    };
    write_record(&record, spec, &cell, dir)
}

fn write_record(record: &RunRecord, spec: &ExperimentSpec, cell: &str, dir: &Path) -> Result<RunSidecar> {
    write_atomic(&csv_path(dir, cell), record.to_csv_string()?.as_bytes())?;
    let sidecar = RunSidecar::new(cell, spec, record);
    write_atomic(&sidecar_path(dir, cell), &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

fn describe(s: &RunSidecar) -> String {
    let status = if s.diverged {
        "diverged".to_string()
    } else if s.steps_to_threshold >= 0 {
        format!("threshold at step {}", s.steps_to_threshold)
    } else {
        "threshold not reached".to_string()
    };
    let loss = s.final_loss.map_or("-".to_string(), |l| format!("{l:.3e}"));
    format!("{}: final loss {loss}, {status}", s.cell)
}

pub fn cmd_train(config: &Path, overrides: &Overrides) -> Result<Exit> {
    let cfg = CliConfig::load(config)?;
    if cfg.grid.is_some() {
        return Err(Error::InvalidConfig("config has a grid; use `sweep`".into()));
    }
    let mut spec = cfg.experiment;
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    let dir = resolve_out(overrides.out.as_deref(), cfg.out.as_deref());
    let sidecar = run_cell(&spec, &dir)?;
    println!("{}", describe(&sidecar));
    Ok(if sidecar.diverged { Exit::Failure } else { Exit::Success })
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid axes over `base`, in a fixed order and
/// without duplicate cells.
pub fn expand_grid(base: &ExperimentSpec, grid: &Grid) -> Result<Vec<ExperimentSpec>> {
    let mut cells = Vec::new();
    let mut seen = BTreeSet::new();
    for optimizer in axis(&grid.optimizer, base.optimizer) {
        for order in axis(&grid.order, base.train.order) {
            for eta in axis(&grid.eta, base.train.eta) {
                for alpha in axis(&grid.alpha, base.alpha) {
                    for kappa in axis(&grid.kappa, base.kappa) {
                        for seed in axis(&grid.seed, base.seed) {
                            let mut spec = base.clone();
                            spec.optimizer = optimizer;
                            spec.train.order = order;
                            spec.train.eta = eta;
                            spec.alpha = alpha;
                            spec.kappa = kappa;
                            spec.seed = seed;
                            spec.validate()?;
                            if seen.insert(cell_name(&spec)) {
                                cells.push(spec);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every grid cell whose sidecar is missing, `threads` at a time.
pub fn cmd_sweep(config: &Path, overrides: &Overrides, threads: usize) -> Result<Exit> {
    if threads == 0 {
        return Err(Error::InvalidConfig("--threads must be positive".into()));
    }
    let cfg = CliConfig::load(config)?;
    let mut base = cfg.experiment;
    if let Some(seed) = overrides.seed {
        base.seed = seed;
    }
    let grid = cfg.grid.unwrap_or_default();
    let cells = expand_grid(&base, &grid)?;
    let dir = resolve_out(overrides.out.as_deref(), cfg.out.as_deref());

    let (done, todo): (Vec<_>, Vec<_>) = cells
        .into_iter()
        .partition(|spec| sidecar_path(&dir, &cell_name(spec)).exists());
    if !done.is_empty() {
        println!("skipping {} completed cells", done.len());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let results: Vec<Result<RunSidecar>> =
        pool.install(|| todo.par_iter().map(|spec| run_cell(spec, &dir)).collect());

    let mut diverged = 0;
    for result in results {
        let sidecar = result?;
        diverged += sidecar.diverged as usize;
        println!("{}", describe(&sidecar));
    }
    println!(
        "{} cells run, {} skipped, {} diverged; outputs in {}",
        todo.len(),
        done.len(),
        diverged,
        dir.display()
    );
    Ok(Exit::Success)
}
