//! Sweep execution and the run-directory layout:
//!
//! ```text
//! <run_dir>/config.resolved.json
//! <run_dir>/traces/<cell>__seed<k>.csv
//! <run_dir>/topology/<cell>__seed<k>.edges
//! <run_dir>/summary.csv
//! <run_dir>/failures.csv        (only when some run failed)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use hcef_core::protocol::Simulation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{emit_config, Cell, ExperimentSpec, Targets};
use crate::error::{io_err, HarnessError, Result};
use crate::plotdata::{read_trace, time_to_target, trace_meta, write_trace, TraceFile};

/// Environment variable that replaces the spec's `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "HCEF_OUTPUT_ROOT";

/// `<output root>/<spec name>`, where the root is `$HCEF_OUTPUT_ROOT` when
/// set and the spec's `output_dir` otherwise.
pub fn resolve_run_dir(spec: &ExperimentSpec) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| spec.output_dir.clone());
    root.join(&spec.name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub scheme: String,
    pub beta: f64,
    pub p_edge: Option<f64>,
    pub q: usize,
    pub tau: usize,
    pub runs: usize,
    pub reached: usize,
    /// Median over seeds; runs that never reach the target count as `inf`.
    pub median_time_to_target: Option<f64>,
    pub median_energy_to_target: Option<f64>,
    pub median_final_loss: f64,
    pub median_final_accuracy: f64,
    pub median_final_time: f64,
    pub median_final_energy: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub runs: usize,
    pub summary: Vec<SummaryRow>,
    /// `(run label, error)` for every failed run.
    pub failures: Vec<(String, String)>,
}

/// Median with the upper/lower middle averaged; `inf` entries sort last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        let (a, b) = (v[mid - 1], v[mid]);
        if a == b { a } else { 0.5 * (a + b) }
    }
}

fn run_cell(cell: &Cell, run_dir: &Path) -> Result<()> {
    let sim = Simulation::new(cell.config.clone())?;
    let out = sim.run()?;
    let label = cell.run_label();
    let meta = trace_meta(&cell.key.label(), cell.key.scheme.name(), cell.seed, &out);
    write_trace(&run_dir.join("traces").join(format!("{label}.csv")), &meta, &out.traces)?;
    let edges = run_dir.join("topology").join(format!("{label}.edges"));
    fs::write(&edges, &out.edge_list).map_err(io_err(&edges))
}

/// Summary rows for every cell of `spec`, recomputed from the trace files
/// in `run_dir`. Missing traces (failed runs) are skipped.
pub fn summarize(spec: &ExperimentSpec, run_dir: &Path) -> Result<Vec<SummaryRow>> {
    let cells = spec.cells()?;
    let mut rows = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for cell in &cells {
        let label = cell.key.label();
        if seen.contains(&label) {
            continue;
        }
        seen.push(label.clone());
        let traces: Vec<TraceFile> = cells
            .iter()
            .filter(|c| c.key.label() == label)
            .map(|c| run_dir.join("traces").join(format!("{}.csv", c.run_label())))
            .filter(|p| p.exists())
            .map(|p| read_trace(&p))
            .collect::<Result<_>>()?;
        rows.push(summary_row(&label, cell, &traces, &spec.targets));
    }
    Ok(rows)
}

fn summary_row(label: &str, cell: &Cell, traces: &[TraceFile], targets: &Targets) -> SummaryRow {
    let hits: Vec<Option<(f64, f64)>> = traces.iter().map(|t| time_to_target(&t.rows, targets)).collect();
    let has_target = targets.loss.is_some() || targets.accuracy.is_some();
    let last = |f: fn(&crate::plotdata::TraceRow) -> f64| {
        median(&traces.iter().filter_map(|t| t.rows.last().map(f)).collect::<Vec<_>>())
    };
    SummaryRow {
        cell: label.to_string(),
        scheme: cell.key.scheme.name().to_string(),
        beta: cell.key.beta,
        p_edge: cell.key.p_edge,
        q: cell.key.q,
        tau: cell.key.tau,
        runs: traces.len(),
        reached: hits.iter().filter(|h| h.is_some()).count(),
        median_time_to_target: has_target
            .then(|| median(&hits.iter().map(|h| h.map_or(f64::INFINITY, |v| v.0)).collect::<Vec<_>>())),
        median_energy_to_target: has_target
            .then(|| median(&hits.iter().map(|h| h.map_or(f64::INFINITY, |v| v.1)).collect::<Vec<_>>())),
        median_final_loss: last(|r| r.loss),
        median_final_accuracy: last(|r| r.accuracy),
        median_final_time: last(|r| r.cumulative_time),
        median_final_energy: last(|r| r.cumulative_energy),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Runs every (cell, seed) of the sweep in parallel. A failed run is
/// recorded and the rest still run.
pub fn run_experiment(spec: &ExperimentSpec, run_dir: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    let cells = spec.cells()?;
    for sub in ["traces", "topology"] {
        let dir = run_dir.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let resolved = run_dir.join("config.resolved.json");
    fs::write(&resolved, emit_config(spec)? + "\n").map_err(io_err(&resolved))?;

    let outcomes: Vec<(String, Result<()>)> =
        cells.par_iter().map(|cell| (cell.run_label(), run_cell(cell, run_dir))).collect();
    let failures: Vec<(String, String)> = outcomes
        .into_iter()
        .filter_map(|(label, r)| r.err().map(|e| (label, e.to_string())))
        .collect();
    for (label, err) in &failures {
        log::error!("run {label} failed: {err}");
    }
    let failures_path = run_dir.join("failures.csv");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(io_err(&failures_path))?;
        }
    } else {
        #[derive(Serialize)]
        struct Failure<'a> {
            run: &'a str,
            error: &'a str,
        }
        let rows: Vec<Failure> = failures.iter().map(|(run, error)| Failure { run, error }).collect();
        write_csv(&failures_path, &rows)?;
    }

    let summary = summarize(spec, run_dir)?;
    write_csv(&run_dir.join("summary.csv"), &summary)?;
    Ok(ExperimentReport { run_dir: run_dir.to_path_buf(), runs: cells.len(), summary, failures })
}

/// Reads `summary.csv` back.
pub fn read_summary(run_dir: &Path) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_path(run_dir.join("summary.csv"))?
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(HarnessError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert_eq!(median(&[1.0, 2.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert!(median(&[]).is_nan());
    }
}
