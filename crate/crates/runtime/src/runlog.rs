//! JSON-lines run log: a header with the full scenario and script, one line
//! per run event, and a summary with the metrics and state hash. Replaying a
//! log re-runs it and checks that the events and hash come out the same.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;
use crate::script::{run_script, MetricsReport, RunEvent, Script};
use crate::sim::{Sim, SimError};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        version: u32,
        scenario: Box<Scenario>,
        script: Script,
    },
    Event(RunEvent),
    Summary {
        report: Box<MetricsReport>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub scenario: Scenario,
    pub script: Script,
    pub events: Vec<RunEvent>,
    pub report: Option<MetricsReport>,
}

/// Runs the script and writes the log; returns the metrics (also when the
/// run timed out, flagged in the report).
pub fn record_run(scenario: &Scenario, script: &Script, out: &Path) -> Result<MetricsReport, LogError> {
    let mut w = BufWriter::new(File::create(out)?);
    let mut write = |r: &LogRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    };
    write(&LogRecord::Header {
        version: LOG_VERSION,
        scenario: Box::new(scenario.clone()),
        script: script.clone(),
    })?;
    let mut sim = Sim::new(scenario.clone())?;
    let mut events = Vec::new();
    let report = match run_script(&mut sim, script, |e| events.push(e.clone())) {
        Ok(r) => r,
        Err(t) => *t.report,
    };
    for e in events {
        write(&LogRecord::Event(e))?;
    }
    write(&LogRecord::Summary {
        report: Box::new(report.clone()),
    })?;
    w.flush()?;
    Ok(report)
}

pub fn read_log(path: &Path) -> Result<RunLog, LogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut events = Vec::new();
    let mut report = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            LogRecord::Header { version, scenario, script } => {
                if version != LOG_VERSION {
                    return Err(LogError::Format {
                        line: i + 1,
                        message: format!("log version {version}, expected {LOG_VERSION}"),
                    });
                }
                header = Some((*scenario, script));
            }
            LogRecord::Event(e) => events.push(e),
            LogRecord::Summary { report: r } => report = Some(*r),
        }
    }
    let (scenario, script) = header.ok_or(LogError::Format {
        line: 1,
        message: "missing header record".into(),
    })?;
    Ok(RunLog {
        scenario,
        script,
        events,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub recorded_hash: Option<String>,
    pub replayed: MetricsReport,
    /// Index of the first event that differs, if any.
    pub first_divergence: Option<usize>,
}

impl ReplayResult {
    pub fn matches(&self) -> bool {
        self.first_divergence.is_none() && self.recorded_hash.as_deref() == Some(self.replayed.hash.as_str())
    }
}

pub fn replay(log: &RunLog) -> Result<ReplayResult, LogError> {
    let mut sim = Sim::new(log.scenario.clone())?;
    let mut events = Vec::new();
    let replayed = match run_script(&mut sim, &log.script, |e| events.push(e.clone())) {
        Ok(r) => r,
        Err(t) => *t.report,
    };
    let first_divergence = (0..events.len().max(log.events.len())).find(|&i| events.get(i) != log.events.get(i));
    Ok(ReplayResult {
        recorded_hash: log.report.as_ref().map(|r| r.hash.clone()),
        replayed,
        first_divergence,
    })
}
