//! Run reports and deterministic output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{canonical, LoadedConfig};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: value <= tolerance, value, tolerance, detail: detail.into() }
    }
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub command: String,
    pub checks: Vec<Check>,
    /// Non-convergence and bound flags, each prefixed with where it arose.
    pub flags: Vec<String>,
    pub records: BTreeMap<String, Value>,
    /// Wall times, kept out of the report so that it stays reproducible.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Self::default() }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn record(&mut self, key: &str, value: impl Serialize) {
        self.records.insert(key.into(), serde_json::to_value(value).expect("record serializes"));
    }

    pub fn timed<T>(&mut self, label: impl Into<String>, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push((label.into(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn to_json(&self, loaded: &LoadedConfig) -> Value {
        let mut summary: Vec<&String> = self.flags.iter().collect();
        summary.sort();
        summary.dedup();
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        canonical(&json!({
            "command": self.command,
            "status": if self.all_passed() { "PASS" } else { "FAIL" },
            "checks": self.checks,
            "summary": { "flags": summary, "failed_checks": failed },
            "records": self.records,
            "applied_defaults": loaded.applied_defaults,
            "config": loaded.resolved,
            "provenance": {
                "config_hash": config_hash(&loaded.resolved),
                "code_version": env!("CARGO_PKG_VERSION"),
            },
        }))
    }
}

/// SHA-256 of the compact canonical JSON of the resolved configuration.
pub fn config_hash(resolved: &Value) -> String {
    let text = serde_json::to_string(&canonical(resolved)).expect("value serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory, created on first use.
#[derive(Debug, Clone)]
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|source| CliError::Output { path: dir.display().to_string(), source })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|source| CliError::Output { path: path.display().to_string(), source })
    }

    pub fn write_json(&self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&canonical(value)).expect("value serializes");
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes `report.json` and `timings.json`.
    pub fn finish(&self, report: &RunReport, loaded: &LoadedConfig) -> Result<(), CliError> {
        self.write_json("report.json", &report.to_json(loaded))?;
        let timings: Vec<Value> = report.timings.iter().map(|(k, s)| json!({"stage": k, "seconds": s})).collect();
        self.write_json("timings.json", &Value::Array(timings))
    }
}
