use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ledger::MemorySnapshot;
use crate::optim::StepOutcome;
use crate::session::PassCounts;
use crate::stabilize::ScaleChange;
use crate::trainer::config::RunConfig;

/// Bumped whenever a field is added, removed or changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the report directory.
pub const REPORT_DIR_ENV: &str = "LOMO_REPORT_DIR";

pub const DEFAULT_REPORT_DIR: &str = "reports";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerEvent {
    pub step: usize,
    pub change: ScaleChange,
    /// Scale after the change.
    pub scale: f64,
}

/// The only nondeterministic part of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub step_wall_ms: Vec<f64>,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub outcomes: Vec<StepOutcome>,
    pub final_digest: String,
    pub memory: MemorySnapshot,
    pub scaler_events: Vec<ScalerEvent>,
    pub final_scale: Option<f64>,
    pub passes: PassCounts,
    pub timing: Timing,
}

impl RunReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one step")
    }

    pub fn without_timing(&self) -> RunReport {
        RunReport {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn loss_table(&self) -> String {
        let mut out = String::from("step\tlr\tloss\n");
        for (i, (loss, lr)) in self.losses.iter().zip(&self.learning_rates).enumerate() {
            out.push_str(&format!("{}\t{lr:e}\t{loss:e}\n", i + 1));
        }
        out
    }
}

/// `LOMO_REPORT_DIR` if set, else the config's `report_path`, else `reports`.
pub fn report_dir(config: &RunConfig) -> PathBuf {
    match std::env::var_os(REPORT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => config
            .report_path
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT_DIR)),
    }
}

/// Path of the loss-curve table written next to `report`.
pub fn curve_path(report: &Path) -> PathBuf {
    report.with_extension("loss.tsv")
}

fn create_new(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(contents.as_bytes())?;
    f.sync_all()
}

/// Write `report` to `path` and its loss table beside it. Never overwrites.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    create_new(path, &report.to_json())?;
    create_new(&curve_path(path), &report.loss_table())?;
    Ok(())
}

/// Write into `dir` as `run-<hash>.json`, or `run-<hash>-<n>.json` for the
/// n-th repeat of the same config. Returns the chosen path.
pub fn emit_into(report: &RunReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let short = &report.config_hash[..16];
    for n in 0.. {
        let name = if n == 0 {
            format!("run-{short}.json")
        } else {
            format!("run-{short}-{n}.json")
        };
        let path = dir.join(name);
        if curve_path(&path).exists() {
            continue;
        }
        match emit_report(report, &path) {
            Err(crate::Error::Io(e)) if e.kind() == ErrorKind::AlreadyExists => continue,
            other => return other.map(|_| path),
        }
    }
    unreachable!()
}
