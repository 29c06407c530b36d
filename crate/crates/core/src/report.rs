//! Report files: `cells.csv`, `summary.json` and optional `telemetry.jsonl`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{CellResult, ScenarioReport, TelemetryEvent};
use crate::error::{Error, Result};

pub const CELLS_FILE: &str = "cells.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";

/// Flat CSV row of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub model: String,
    pub task: String,
    pub policy: String,
    pub seed: u64,
    pub requests: u64,
    pub tokens: u64,
    pub iterations: u64,
    pub spec_iterations: u64,
    pub total_time: f64,
    pub t_base: f64,
    pub tpot: f64,
    pub etr: f64,
    pub cost: f64,
    pub utility: f64,
    pub hm_utility: f64,
    pub mean_k: f64,
    pub speedup: Option<f64>,
    pub error: Option<String>,
}

impl From<&CellResult> for CellRow {
    fn from(c: &CellResult) -> Self {
        let a = &c.agg;
        Self {
            model: c.model.clone(),
            task: c.task.clone(),
            policy: c.policy.clone(),
            seed: c.seed,
            requests: a.requests,
            tokens: a.tokens,
            iterations: a.iterations,
            spec_iterations: a.spec_iterations,
            total_time: a.total_time,
            t_base: a.t_base,
            tpot: a.tpot,
            etr: a.etr,
            cost: a.cost,
            utility: a.utility,
            hm_utility: a.hm_utility,
            mean_k: a.mean_k,
            speedup: c.speedup,
            error: c.error.clone(),
        }
    }
}

pub fn cells_csv(cells: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(CellRow::from(c))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_cells_csv(path: &Path) -> Result<Vec<CellRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
        _ => Error::Csv(e),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the report into `dir` (created if missing) and returns the paths written.
pub fn write_report(
    dir: &Path,
    report: &ScenarioReport,
    telemetry: Option<&[Vec<TelemetryEvent>]>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let cells = dir.join(CELLS_FILE);
    write_file(&cells, cells_csv(&report.cells)?.as_bytes())?;
    written.push(cells);

    let summary = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(&summary, json.as_bytes())?;
    written.push(summary);

    if let Some(tele) = telemetry {
        let path = dir.join(TELEMETRY_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        #[derive(Serialize)]
        struct Line<'a> {
            cell: usize,
            #[serde(flatten)]
            event: &'a TelemetryEvent,
        }
        for (cell, events) in tele.iter().enumerate() {
            for event in events {
                serde_json::to_writer(&mut w, &Line { cell, event })?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_report(dir: &Path) -> Result<ScenarioReport> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        msg: e.to_string(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table of cells followed by the per-policy summary.
pub fn render_text(report: &ScenarioReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<14} {:<10} {:>6} {:>8} {:>10} {:>6} {:>6} {:>7} {:>7} {:>6}",
        "model", "task", "policy", "seed", "tokens", "tpot", "etr", "cost", "utility", "speedup", "mean_k"
    );
    for c in &report.cells {
        if let Some(e) = &c.error {
            let _ = writeln!(
                out,
                "{:<10} {:<14} {:<10} {:>6} error: {e}",
                c.model, c.task, c.policy, c.seed
            );
            continue;
        }
        let a = &c.agg;
        let _ = writeln!(
            out,
            "{:<10} {:<14} {:<10} {:>6} {:>8} {:>10.4} {:>6.3} {:>6.3} {:>7.3} {:>7} {:>6.2}",
            c.model,
            c.task,
            c.policy,
            c.seed,
            a.tokens,
            a.tpot,
            a.etr,
            a.cost,
            a.utility,
            opt(c.speedup),
            a.mean_k
        );
    }
    if !report.policies.is_empty() {
        let _ = writeln!(
            out,
            "\n{:<10} {:>6} {:>8} {:>8} {:>8}  worst cell",
            "policy", "cells", "mean", "worst", "best"
        );
        for p in &report.policies {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8.3} {:>8.3} {:>8.3}  {}",
                p.policy, p.cells, p.mean_speedup, p.worst_speedup, p.best_speedup, p.worst_cell
            );
        }
    }
    if let Some(r) = &report.regression {
        let _ = writeln!(
            out,
            "\nspeedup ~ utility over {} cells: slope {:.4}, intercept {:.4}, R^2 {:.5}",
            r.n, r.slope, r.intercept, r.r2
        );
    }
    out
}
