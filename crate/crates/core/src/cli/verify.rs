use std::path::Path;

use super::{write_atomic, Exit};
use crate::error::{Error, Result};
use crate::oracle::{check_names, run_checks, Bound};

pub const REPORT_FILE: &str = "verify_report.json";

/// Runs the checks whose names match `filter` (a glob; all when `None`),
/// writes `verify_report.json` under `out` and prints a table.
pub fn cmd_verify(filter: Option<&str>, seed: u64, out: &Path) -> Result<Exit> {
    let pattern = filter
        .map(glob::Pattern::new)
        .transpose()
        .map_err(|e| Error::InvalidConfig(format!("bad filter: {e}")))?;
    let selected = |name: &str| pattern.as_ref().is_none_or(|p| p.matches(name));
    if !check_names().into_iter().any(selected) {
        eprintln!("no checks selected by filter {:?}", filter.unwrap_or("*"));
        return Ok(Exit::NoChecksSelected);
    }

    let report = run_checks(selected, seed)?;
    let json = serde_json::to_vec_pretty(&report)?;
    write_atomic(&out.join(REPORT_FILE), &json)?;

    println!("{:<42} {:>9} {:>12} {:>12} {:>8}", "check", "instances", "deviation", "tolerance", "result");
    for c in &report.checks {
        let op = match c.bound {
            Bound::Upper => "<=",
            Bound::Lower => "> ",
        };
        println!(
            "{:<42} {:>9} {:>12.3e} {} {:>9.1e} {:>8}",
            c.name,
            c.instances,
            c.max_deviation,
            op,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    println!("{} checks, {} failed", report.checks.len(), report.failures);
    Ok(if report.failures == 0 { Exit::Success } else { Exit::Failure })
}
