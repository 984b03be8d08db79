use std::io::Write;

use serde::{Deserialize, Serialize};

use super::accounting::{gradient_flops, optimizer_step_flops};
use super::spec::ExperimentSpec;
use super::task::generate_task;
use crate::error::{Error, Result};
use crate::optim::Optimizer;

/// Loss level that counts as converged.
pub const LOSS_THRESHOLD: f64 = 1e-3;
/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

pub const CSV_HEADER: [&str; 6] = ["step", "loss", "weight_err", "grad_norm", "state_entries", "flops"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub loss: f64,
    pub weight_err: f64,
    pub grad_norm: f64,
    pub state_entries: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
    /// First step whose loss is at most [`LOSS_THRESHOLD`], or −1.
    pub steps_to_threshold: i64,
    pub diverged: bool,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<EvalRow>> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::InvalidConfig(format!("unexpected CSV header {header:?}")));
        }
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

/// Terminal metadata written next to a run's CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSidecar {
    pub schema_version: u32,
    pub cell: String,
    pub spec: ExperimentSpec,
    pub steps_to_threshold: i64,
    pub diverged: bool,
    pub final_loss: Option<f64>,
    pub build_id: String,
}

impl RunSidecar {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn new(cell: &str, spec: &ExperimentSpec, record: &RunRecord) -> Self {
        Self {
            schema_version: Self::SCHEMA_VERSION,
            cell: cell.to_string(),
            spec: spec.clone(),
            steps_to_threshold: record.steps_to_threshold,
            diverged: record.diverged,
            final_loss: record.final_loss(),
            build_id: BUILD_ID.to_string(),
        }
    }
}

/// `git describe` output at build time, or `unknown`.
pub const BUILD_ID: &str = env!("ALTLORA_BUILD_ID");

/// Full-batch training loop. The gradient is re-evaluated before every step,
/// so an alternating optimizer's second phase sees the half-step weight.
///
/// Rows are recorded at step 0, every `eval_every` steps and at the last
/// step; the loss in a row is measured before that step's update.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunRecord> {
    spec.validate()?;
    let mut task = generate_task(spec)?;
    let mut optimizer = Optimizer::new(spec.optimizer, spec.train.clone(), &task.model.layer)?;
    let (k, d) = spec.layer_dims();
    let m = spec.samples();
    let head = task.model.head().map(|h| h.rows());
    let grad_cost = gradient_flops(k, d, spec.r, m, head);

    let steps = spec.train.steps;
    let mut record = RunRecord {
        rows: Vec::new(),
        steps_to_threshold: -1,
        diverged: false,
    };
    let mut flops: u64 = 0;
    for step in 0..=steps {
        let (loss, g) = task.model.loss_and_gradient(&task.x, &task.y)?;
        flops += grad_cost;
        let last = step == steps;
        let reached = loss <= LOSS_THRESHOLD;
        if reached && record.steps_to_threshold < 0 {
            record.steps_to_threshold = step as i64;
        }
        let stop = last || (reached && spec.stop_at_threshold);
        if step % spec.eval_every == 0 || stop || !loss.is_finite() || loss > DIVERGENCE_LOSS {
            record.rows.push(EvalRow {
                step,
                loss,
                weight_err: task.weight_error(),
                grad_norm: g.g.frobenius_norm(),
                state_entries: optimizer.state_entries(),
                flops,
            });
        }
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            record.diverged = true;
            return Err(Error::DivergenceDetected {
                step,
                loss,
                partial: Box::new(record),
            });
        }
        if stop {
            break;
        }
        let phase = optimizer.next_phase();
        optimizer.step(&mut task.model.layer, &g.g)?;
        flops += optimizer_step_flops(spec.optimizer, &spec.train, k, d, spec.r, phase);
    }
    Ok(record)
}
