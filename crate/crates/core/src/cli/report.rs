use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, Exit};
use crate::bench::{RunRecord, RunSidecar};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub optimizer: String,
    pub eta: f64,
    pub alpha: f64,
    pub order: String,
    pub kappa: f64,
    pub seed: u64,
    pub steps_to_threshold: i64,
    pub diverged: bool,
    pub final_loss: Option<f64>,
}

impl SummaryRow {
    fn from_sidecar(s: &RunSidecar) -> Self {
        Self {
            cell: s.cell.clone(),
            optimizer: s.spec.optimizer.to_string(),
            eta: s.spec.train.eta,
            alpha: s.spec.alpha,
            order: s.spec.train.order.as_str().to_string(),
            kappa: s.spec.kappa,
            seed: s.spec.seed,
            steps_to_threshold: s.steps_to_threshold,
            diverged: s.diverged,
            final_loss: s.final_loss,
        }
    }

    /// Orders runs: reached the threshold (fewest steps), then lowest loss.
    fn rank_key(&self) -> (bool, i64, f64) {
        let reached = self.steps_to_threshold >= 0 && !self.diverged;
        let steps = if reached { self.steps_to_threshold } else { i64::MAX };
        let loss = if self.diverged { f64::INFINITY } else { self.final_loss.unwrap_or(f64::INFINITY) };
        (!reached, steps, loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub text: String,
}

fn is_sidecar(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".run.json"))
}

/// Reads every `*.run.json` sidecar and checks every run CSV's header.
/// Returns `None` when the directory holds no runs.
pub fn build_report(dir: &Path) -> Result<Option<Report>> {
    let mut paths: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(entries) => entries.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    paths.sort();

    let mut bad = Vec::new();
    let mut rows = Vec::new();
    for path in &paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if is_sidecar(path) {
            match fs::read_to_string(path)
                .map_err(Error::from)
                .and_then(|t| serde_json::from_str::<RunSidecar>(&t).map_err(Error::from))
            {
                Ok(s) if s.schema_version == RunSidecar::SCHEMA_VERSION => rows.push(SummaryRow::from_sidecar(&s)),
                _ => bad.push(name.to_string()),
            }
        } else if name.ends_with(".csv") && name != SUMMARY_FILE {
            let ok = fs::File::open(path)
                .map_err(Error::from)
                .and_then(RunRecord::read_csv)
                .is_ok();
            if !ok {
                bad.push(name.to_string());
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "schema mismatch in {} file(s): {}",
            bad.len(),
            bad.join(", ")
        )));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let text = render(&rows);
    Ok(Some(Report { rows, text }))
}

fn fmt_steps(steps: i64, diverged: bool) -> String {
    if diverged {
        "div".into()
    } else if steps < 0 {
        "never".into()
    } else {
        steps.to_string()
    }
}

fn render(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut best: BTreeMap<&str, &SummaryRow> = BTreeMap::new();
    for row in rows {
        let entry = best.entry(&row.optimizer).or_insert(row);
        if row.rank_key().partial_cmp(&entry.rank_key()) == Some(std::cmp::Ordering::Less) {
            *entry = row;
        }
    }
    let _ = writeln!(out, "best cell per optimizer");
    let _ = writeln!(out, "{:<16} {:>8} {:>12} {:<}", "optimizer", "steps", "final_loss", "cell");
    for (opt, row) in &best {
        let loss = row.final_loss.map_or("-".to_string(), |l| format!("{l:.3e}"));
        let _ = writeln!(out, "{:<16} {:>8} {:>12} {}", opt, fmt_steps(row.steps_to_threshold, row.diverged), loss, row.cell);
    }

    // Runs that differ only in kappa share a matrix row.
    let mut kappas: Vec<f64> = rows.iter().map(|r| r.kappa).collect();
    kappas.sort_by(f64::total_cmp);
    kappas.dedup();
    if kappas.len() < 2 {
        return out;
    }
    let mut groups: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        let key = format!("{} eta={} alpha={} {} seed={}", row.optimizer, row.eta, row.alpha, row.order, row.seed);
        groups.entry(key).or_default().push(row);
    }
    let _ = writeln!(out, "\nsteps_to_threshold vs kappa");
    let mut header = format!("{:<48}", "configuration");
    for k in &kappas {
        let _ = write!(header, " {:>9}", format!("k={k}"));
    }
    let _ = writeln!(out, "{header} {:>8}", "max/min");
    for (key, group) in groups.iter().filter(|(_, g)| g.len() >= 2) {
        let mut line = format!("{key:<48}");
        for k in &kappas {
            let cell = group
                .iter()
                .find(|r| r.kappa == *k)
                .map_or("-".to_string(), |r| fmt_steps(r.steps_to_threshold, r.diverged));
            let _ = write!(line, " {cell:>9}");
        }
        let reached: Vec<i64> = group
            .iter()
            .filter(|r| !r.diverged && r.steps_to_threshold >= 0)
            .map(|r| r.steps_to_threshold.max(1))
            .collect();
        let ratio = if reached.len() == group.len() {
            let max = *reached.iter().max().unwrap() as f64;
            let min = *reached.iter().min().unwrap() as f64;
            format!("{:.2}", max / min)
        } else {
            "n/a".to_string()
        };
        let _ = writeln!(out, "{line} {ratio:>8}");
    }
    out
}

/// Aggregates a sweep directory into `summary.csv` and prints the tables.
pub fn cmd_report(dir: &Path) -> Result<Exit> {
    let Some(report) = build_report(dir)? else {
        println!("no runs in {}", dir.display());
        return Ok(Exit::Success);
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(SUMMARY_FILE), &bytes)?;
    print!("{}", report.text);
    Ok(Exit::Success)
}
