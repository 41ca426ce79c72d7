//! Tables and figures from run records. Besides grouping, the only
//! arithmetic here is mean, standard deviation, min and max over seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use walkdir::WalkDir;

use crate::error::CliError;
use crate::record::{RunRecord, RunStatus, METRICS_FILE, SCHEMA_VERSION};
use crate::stats::Summary;
use crate::svg::{LinePlot, Series, PALETTE};

/// Column set of the summary CSV. Changing it is a schema change.
pub const CSV_COLUMNS: [&str; 7] =
    ["method", "label_fraction", "n_seeds", "knn_mean", "knn_std", "probe_mean", "probe_std"];

pub const TRADEOFF_SVG: &str = "lambda_tradeoff.svg";
pub const CDNV_SVG: &str = "cdnv_consolidation.svg";

/// Expands each argument: directories are searched recursively for
/// metrics files, patterns with wildcards are globbed, anything else is
/// taken as a file.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        let text = input.to_string_lossy();
        if input.is_dir() {
            for entry in WalkDir::new(input).sort_by_file_name() {
                let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
                if entry.file_type().is_file() && entry.file_name() == METRICS_FILE {
                    files.push(entry.into_path());
                }
            }
        } else if text.contains(['*', '?', '[']) {
            let paths = glob::glob(&text).map_err(|e| CliError::Config(format!("bad pattern {text}: {e}")))?;
            for p in paths {
                files.push(p.map_err(|e| CliError::Runtime(e.to_string()))?);
            }
        } else {
            files.push(input.clone());
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

/// Loads every record, failing with the full list of files whose schema
/// does not match.
pub fn load_records(files: &[PathBuf]) -> Result<Vec<(PathBuf, RunRecord)>, CliError> {
    if files.is_empty() {
        return Err(CliError::Config("no run records found".into()));
    }
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| CliError::Runtime(format!("{}: {e}", f.display())))?;
        let value: serde_json::Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                bad.push(format!("{}: not JSON ({e})", f.display()));
                continue;
            }
        };
        match value.get("schema").and_then(|s| s.as_u64()) {
            Some(s) if s == SCHEMA_VERSION as u64 => {}
            Some(s) => {
                bad.push(format!("{}: schema {s}, expected {SCHEMA_VERSION}", f.display()));
                continue;
            }
            None => {
                bad.push(format!("{}: no schema field", f.display()));
                continue;
            }
        }
        match serde_json::from_value::<RunRecord>(value) {
            Ok(r) => {
                if !r.hash_matches() {
                    bad.push(format!("{}: config hash does not match the stored config", f.display()));
                } else {
                    records.push((f.clone(), r));
                }
            }
            Err(e) => bad.push(format!("{}: {e}", f.display())),
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Runtime(format!("inconsistent run records:\n  {}", bad.join("\n  "))));
    }
    Ok(records)
}

/// Only finished runs enter a report.
fn complete(records: &[(PathBuf, RunRecord)]) -> Vec<&RunRecord> {
    records
        .iter()
        .filter_map(|(p, r)| {
            if r.status == RunStatus::Complete {
                Some(r)
            } else {
                warn!("skipping {} (status {:?})", p.display(), r.status);
                None
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Final kNN and probe accuracy, mean and sample standard deviation over
/// seeds, one row per (method, label fraction).
pub fn summary_csv(records: &[(PathBuf, RunRecord)]) -> Result<String, CliError> {
    let mut groups: BTreeMap<(String, String), (Summary, Summary)> = BTreeMap::new();
    for r in complete(records) {
        let entry = groups.entry((r.method.clone(), format!("{}", r.label_fraction))).or_default();
        if let Some(k) = r.metrics.final_knn() {
            entry.0.push(k);
        }
        if let Some(p) = r.metrics.final_probe() {
            entry.1.push(p);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for ((method, fraction), (knn, probe)) in &groups {
        w.write_record([
            method.clone(),
            fraction.clone(),
            knn.count().to_string(),
            fmt_opt(knn.mean()),
            fmt_opt(knn.std()),
            fmt_opt(probe.mean()),
            fmt_opt(probe.std()),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Per-task accuracy against session, one series per MI weight; each task
/// is a line of seed means starting at the session that introduced it.
pub fn tradeoff_svg(records: &[(PathBuf, RunRecord)]) -> String {
    let mut by_lambda: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in complete(records) {
        by_lambda.entry(format!("{}", r.lambda_mi)).or_default().push(r);
    }
    let mut keys: Vec<(f64, String)> = by_lambda.keys().map(|k| (k.parse().unwrap_or(f64::NAN), k.clone())).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut plot = LinePlot {
        title: "Per-task accuracy by MI weight".into(),
        x_label: "session".into(),
        y_label: "task-agnostic kNN accuracy".into(),
        series: Vec::new(),
    };
    for (k, (_, key)) in keys.iter().enumerate() {
        let runs = &by_lambda[key];
        let sessions = runs.iter().map(|r| r.metrics.sessions.len()).min().unwrap_or(0);
        let tasks = runs.iter().filter_map(|r| r.metrics.sessions.first().map(|s| s.task_accuracy.len())).min().unwrap_or(0);
        let mut lines = Vec::new();
        for task in 0..tasks {
            let line: Vec<(f64, f64)> = (task..sessions)
                .filter_map(|t| {
                    let s: Summary = runs.iter().map(|r| r.metrics.sessions[t].task_accuracy[task]).collect();
                    s.mean().map(|m| (t as f64, m))
                })
                .collect();
            lines.push(line);
        }
        plot.series.push(Series {
            name: format!("λ_MI = {key}"),
            color: PALETTE[k % PALETTE.len()].into(),
            lines,
            band: Vec::new(),
        });
    }
    plot.render()
}

/// Test-split CDNV over consolidation epochs, sessions laid end to end:
/// seed mean as a line, seed min/max as a band, one series per method.
pub fn cdnv_svg(records: &[(PathBuf, RunRecord)]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in complete(records) {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    let mut plot = LinePlot {
        title: "CDNV during consolidation".into(),
        x_label: "consolidation epoch (all sessions)".into(),
        y_label: "test CDNV".into(),
        series: Vec::new(),
    };
    for (k, (method, runs)) in by_method.iter().enumerate() {
        let traces: Vec<Vec<f64>> = runs.iter().map(|r| concatenated_trace(r)).collect();
        let len = traces.iter().map(Vec::len).min().unwrap_or(0);
        let mut mean = Vec::with_capacity(len);
        let mut band = Vec::with_capacity(len);
        for e in 0..len {
            let s: Summary = traces.iter().map(|t| t[e]).collect();
            if let (Some(m), Some(lo), Some(hi)) = (s.mean(), s.min(), s.max()) {
                mean.push((e as f64, m));
                band.push((e as f64, lo, hi));
            }
        }
        plot.series.push(Series {
            name: method.to_string(),
            color: PALETTE[k % PALETTE.len()].into(),
            lines: vec![mean],
            band,
        });
    }
    plot.render()
}

/// Each session's trace starts where the previous one ended (the backbone
/// does not move in between), so the shared point is kept once.
fn concatenated_trace(r: &RunRecord) -> Vec<f64> {
    let mut out = Vec::new();
    for (t, s) in r.metrics.sessions.iter().enumerate() {
        let skip = usize::from(t > 0 && !out.is_empty());
        out.extend(s.cdnv_trace.iter().skip(skip));
    }
    out
}

/// Writes both figures into `dir` and returns their paths.
pub fn write_svgs(records: &[(PathBuf, RunRecord)], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let out = vec![dir.join(TRADEOFF_SVG), dir.join(CDNV_SVG)];
    std::fs::write(&out[0], tradeoff_svg(records))?;
    std::fs::write(&out[1], cdnv_svg(records))?;
    Ok(out)
}
