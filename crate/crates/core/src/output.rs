//! Run artifacts on disk.
//!
//! A run directory holds:
//!
//! - `config.toml`: the fully resolved configuration
//! - `summary.json`: headline metrics and diagnostics
//! - `curve.csv`: `virtual_time,version,test_accuracy,test_loss`
//! - `events.jsonl`: one aggregation event per line
//! - `probe.csv` and `probe_bins.csv`: only when the alignment probe is on
//!
//! Every file is written to a temporary sibling and then renamed into place,
//! so readers never observe a partially written artifact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{
    binned_correlation, compare_runs, CorrelationReport, Diagnostics, RunRecord, SummaryRow,
    SUMMARY_CSV_HEADER, TABLE_CSV_HEADER,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_BINS_FILE: &str = "probe_bins.csv";

pub const CURVE_CSV_HEADER: &str = "virtual_time,version,test_accuracy,test_loss";
pub const PROBE_CSV_HEADER: &str = "virtual_time,kappa,align";
pub const PROBE_BINS_CSV_HEADER: &str = "kappa_mid,mean_align,count";
pub const CURVES_CSV_HEADER: &str = "strategy,dataset,alpha,latency_kind,seed,virtual_time,test_accuracy";

/// Writes `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub dataset: String,
    pub alpha: f64,
    pub latency_kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub aulc: Option<f64>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<CorrelationReport>,
}

impl RunSummary {
    pub fn new(config: &Config, record: &RunRecord, probe: Option<CorrelationReport>) -> Self {
        RunSummary {
            strategy: config.strategy().name().to_string(),
            dataset: config.dataset.name(),
            alpha: config.alpha,
            latency_kind: config.latency.label(),
            seed: config.seed,
            config_hash: record.config_hash.clone(),
            final_accuracy: record.final_accuracy(),
            final_loss: record.curve.last().map(|p| p.test_loss),
            aulc: record.aulc(),
            diagnostics: record.diagnostics.clone(),
            probe,
        }
    }

    pub fn row(&self) -> Option<SummaryRow> {
        Some(SummaryRow {
            strategy: self.strategy.clone(),
            dataset: self.dataset.clone(),
            alpha: self.alpha,
            latency_kind: self.latency_kind.clone(),
            seed: self.seed,
            final_accuracy: self.final_accuracy?,
            aulc: self.aulc,
        })
    }
}

pub fn curve_csv(record: &RunRecord) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in &record.curve {
        let _ = writeln!(out, "{},{},{},{}", p.virtual_time, p.version, p.test_accuracy, p.test_loss);
    }
    out
}

pub fn events_jsonl(record: &RunRecord) -> String {
    let mut out = String::new();
    for e in &record.events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn probe_csv(record: &RunRecord) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for s in &record.probe {
        let _ = writeln!(out, "{},{},{}", s.virtual_time, s.kappa, s.align);
    }
    out
}

pub fn probe_bins_csv(report: &CorrelationReport) -> String {
    let mut out = String::from(PROBE_BINS_CSV_HEADER);
    out.push('\n');
    for b in &report.bins {
        let _ = writeln!(out, "{},{},{}", b.kappa_mid, b.mean_align, b.count);
    }
    out
}

/// Writes every artifact of one run into `dir` and returns its summary.
pub fn write_run(dir: &Path, config: &Config, record: &RunRecord) -> Result<RunSummary> {
    let probe = if config.probe.enabled && record.probe.len() >= 10 {
        Some(binned_correlation(&record.probe, config.probe.bin_width)?)
    } else {
        None
    };
    write_atomic(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    write_atomic(&dir.join(CURVE_FILE), curve_csv(record).as_bytes())?;
    write_atomic(&dir.join(EVENTS_FILE), events_jsonl(record).as_bytes())?;
    if config.probe.enabled {
        write_atomic(&dir.join(PROBE_FILE), probe_csv(record).as_bytes())?;
        if let Some(report) = &probe {
            write_atomic(&dir.join(PROBE_BINS_FILE), probe_bins_csv(report).as_bytes())?;
        }
    }
    let summary = RunSummary::new(config, record, probe);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    // The summary goes last: its presence marks a completed run.
    write_atomic(&dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(summary)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(SUMMARY_FILE).is_file()
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        offset: e.column() as u64,
        message: e.to_string(),
    })
}

/// All run directories under `root` that contain a summary, sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                found.push(dir.clone());
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Aggregated view of a results directory.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    /// Directories whose summary could not be read or lacked a final accuracy.
    pub skipped: Vec<PathBuf>,
}

pub fn collect_report(root: &Path) -> Result<Report> {
    let mut report = Report::default();
    for dir in find_runs(root)? {
        match read_summary(&dir).ok().and_then(|s| s.row()) {
            Some(row) => report.rows.push(row),
            None => report.skipped.push(dir),
        }
    }
    Ok(report)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn table_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(TABLE_CSV_HEADER);
    out.push('\n');
    for r in compare_runs(rows) {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Long-format learning curves of every run under `root`, for plotting.
pub fn curves_csv(root: &Path) -> Result<String> {
    let mut out = String::from(CURVES_CSV_HEADER);
    out.push('\n');
    for dir in find_runs(root)? {
        let Ok(summary) = read_summary(&dir) else { continue };
        let path = dir.join(CURVE_FILE);
        let Ok(text) = fs::read_to_string(&path) else { continue };
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                continue;
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                summary.strategy, summary.dataset, summary.alpha, summary.latency_kind, summary.seed, cols[0], cols[2]
            );
        }
    }
    Ok(out)
}

pub const REPORT_SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_TABLE_FILE: &str = "table.csv";
pub const REPORT_CURVES_FILE: &str = "curves.csv";

/// Writes `summary.csv`, `table.csv` and `curves.csv` into `out`.
pub fn write_report(root: &Path, out: &Path) -> Result<Report> {
    let report = collect_report(root)?;
    write_atomic(&out.join(REPORT_SUMMARY_FILE), summary_csv(&report.rows).as_bytes())?;
    write_atomic(&out.join(REPORT_TABLE_FILE), table_csv(&report.rows).as_bytes())?;
    write_atomic(&out.join(REPORT_CURVES_FILE), curves_csv(root)?.as_bytes())?;
    Ok(report)
}
