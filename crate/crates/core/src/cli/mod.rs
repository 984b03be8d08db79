//! Command drivers behind the `altlora` binary.
//!
//! Each `cmd_*` function returns the [`Exit`] status the process should end
//! with; errors are mapped through [`Exit::for_error`]. Every file is written
//! through [`write_atomic`], so an interrupted command leaves either the
//! complete file or nothing.

mod report;
mod run;
mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::ExperimentSpec;
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, UpdateOrder};

pub use report::{build_report, cmd_report, Report, SummaryRow, SUMMARY_FILE};
pub use run::{cell_name, cmd_sweep, cmd_train, expand_grid, Overrides};
pub use verify::{cmd_verify, REPORT_FILE};

/// Output directory used when neither `--out`, the config nor `ALTLORA_OUT` names one.
pub const DEFAULT_OUT: &str = "altlora-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success,
    Failure,
    Usage,
    Internal,
    NoChecksSelected,
}

impl Exit {
    pub fn code(self) -> i32 {
        match self {
            Exit::Success => 0,
            Exit::Failure => 1,
            Exit::Usage => 2,
            Exit::Internal => 3,
            Exit::NoChecksSelected => 4,
        }
    }

    pub fn for_error(err: &Error) -> Exit {
        match err {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) | Error::Csv(_) => Exit::Usage,
            Error::DivergenceDetected { .. } => Exit::Failure,
            _ => Exit::Internal,
        }
    }
}

/// Sweep axes. An empty axis keeps the base experiment's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub order: Vec<UpdateOrder>,
    pub optimizer: Vec<OptimizerKind>,
    pub kappa: Vec<f64>,
    pub seed: Vec<u64>,
}

/// A config file: `{"experiment": {...}, "out": "...", "grid": {...}}`.
/// Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub experiment: ExperimentSpec,
    pub out: Option<PathBuf>,
    pub grid: Option<Grid>,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CliConfig = serde_json::from_str(text)?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// `--out`, then the config's `out`, then `ALTLORA_OUT`, then [`DEFAULT_OUT`].
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("ALTLORA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
