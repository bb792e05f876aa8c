//! Trace CSV files and the long-format plot data derived from them.
//!
//! A trace file starts with two comment lines, the schema version and the
//! run metadata, followed by a CSV header and one row per edge round:
//!
//! ```text
//! # hcef-trace v1
//! # cell=HCEF_b1_base_q5_t5 scheme=HCEF seed=3 initial_loss=2.30 initial_accuracy=0.1 zeta=0.80
//! global_round,edge_round,loss,...
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hcef_core::protocol::{RoundTrace, RunOutput};
use serde::{Deserialize, Serialize};

use crate::config::Targets;
use crate::error::{io_err, HarnessError, Result};

pub const TRACE_VERSION_LINE: &str = "# hcef-trace v1";
pub const PLOT_VERSION_LINE: &str = "# hcef-plotdata v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub global_round: usize,
    pub edge_round: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub cumulative_time: f64,
    pub cumulative_energy: f64,
    pub realized_time: f64,
    pub realized_energy: f64,
    pub realized_steps: usize,
    pub mean_rho: f64,
    pub mean_theta: f64,
    pub iterations: usize,
    pub feasible: bool,
    pub floor_round: bool,
    /// Per-cluster round times joined with `;`.
    pub cluster_times: String,
}

impl From<&RoundTrace> for TraceRow {
    fn from(t: &RoundTrace) -> Self {
        Self {
            global_round: t.global_round,
            edge_round: t.edge_round,
            loss: t.loss,
            accuracy: t.accuracy,
            cumulative_time: t.cumulative_time,
            cumulative_energy: t.cumulative_energy,
            realized_time: t.realized_time,
            realized_energy: t.realized_energy,
            realized_steps: t.realized_steps,
            mean_rho: t.mean_rho,
            mean_theta: t.mean_theta,
            iterations: t.iterations,
            feasible: t.feasible,
            floor_round: t.floor_round,
            cluster_times: t.cluster_times.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        }
    }
}

/// Run metadata stored in a trace file's second comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub cell: String,
    pub scheme: String,
    pub seed: u64,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub zeta: f64,
}

impl TraceMeta {
    fn to_line(&self) -> String {
        format!(
            "# cell={} scheme={} seed={} initial_loss={} initial_accuracy={} zeta={}",
            self.cell, self.scheme, self.seed, self.initial_loss, self.initial_accuracy, self.zeta
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let body = line.strip_prefix("# ")?;
        let field = |name: &str| {
            body.split(' ')
                .find_map(|kv| kv.strip_prefix(name).and_then(|rest| rest.strip_prefix('=')))
                .map(str::to_string)
        };
        Some(Self {
            cell: field("cell")?,
            scheme: field("scheme")?,
            seed: field("seed")?.parse().ok()?,
            initial_loss: field("initial_loss")?.parse().ok()?,
            initial_accuracy: field("initial_accuracy")?.parse().ok()?,
            zeta: field("zeta")?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
}

pub fn trace_meta(cell: &str, scheme: &str, seed: u64, out: &RunOutput) -> TraceMeta {
    TraceMeta {
        cell: cell.to_string(),
        scheme: scheme.to_string(),
        seed,
        initial_loss: out.initial.loss,
        initial_accuracy: out.initial.accuracy,
        zeta: out.zeta,
    }
}

pub fn write_trace(path: &Path, meta: &TraceMeta, traces: &[RoundTrace]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{TRACE_VERSION_LINE}").expect("write to memory");
    writeln!(buf, "{}", meta.to_line()).expect("write to memory");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for t in traces {
            w.serialize(TraceRow::from(t))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_VERSION_LINE) {
        return Err(HarnessError::Trace(format!("{}: missing `{TRACE_VERSION_LINE}` header", path.display())));
    }
    let meta = lines
        .next()
        .and_then(TraceMeta::parse)
        .ok_or_else(|| HarnessError::Trace(format!("{}: bad metadata line", path.display())))?;
    let rows = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()?;
    Ok(TraceFile { meta, rows })
}

/// Trace files of a run directory, sorted by file name.
pub fn read_run_traces(run_dir: &Path) -> Result<Vec<TraceFile>> {
    let dir = run_dir.join("traces");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_trace(p)).collect()
}

/// Whether a row meets every configured target. No targets means never.
pub fn reaches(row: &TraceRow, targets: &Targets) -> bool {
    if targets.loss.is_none() && targets.accuracy.is_none() {
        return false;
    }
    targets.loss.is_none_or(|l| row.loss <= l) && targets.accuracy.is_none_or(|a| row.accuracy >= a)
}

/// Cumulative time and energy at the first row meeting the targets.
pub fn time_to_target(rows: &[TraceRow], targets: &Targets) -> Option<(f64, f64)> {
    rows.iter().find(|r| reaches(r, targets)).map(|r| (r.cumulative_time, r.cumulative_energy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scheme: String,
    pub cell: String,
    pub seed: u64,
    pub x_metric: String,
    pub x: f64,
    pub y_metric: String,
    pub y: f64,
}

/// `(x, y)` pairings emitted for every trace.
pub const PAIRINGS: [(&str, &str); 4] = [
    ("cumulative_time", "accuracy"),
    ("cumulative_energy", "accuracy"),
    ("cumulative_time", "loss"),
    ("cumulative_energy", "loss"),
];

fn metric(row: &TraceRow, name: &str) -> f64 {
    match name {
        "cumulative_time" => row.cumulative_time,
        "cumulative_energy" => row.cumulative_energy,
        "accuracy" => row.accuracy,
        "loss" => row.loss,
        other => unreachable!("unknown metric {other}"),
    }
}

/// Long-format rows: for every trace and pairing, one row per edge round.
pub fn emit_plot_data(traces: &[TraceFile]) -> Vec<PlotRow> {
    let mut out = Vec::new();
    for t in traces {
        for (x_metric, y_metric) in PAIRINGS {
            for row in &t.rows {
                out.push(PlotRow {
                    scheme: t.meta.scheme.clone(),
                    cell: t.meta.cell.clone(),
                    seed: t.meta.seed,
                    x_metric: x_metric.into(),
                    x: metric(row, x_metric),
                    y_metric: y_metric.into(),
                    y: metric(row, y_metric),
                });
            }
        }
    }
    out
}

pub fn write_plot_data(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{PLOT_VERSION_LINE}").expect("write to memory");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Writes `plotdata.csv` into a run directory from its trace files.
pub fn plot_run_dir(run_dir: &Path) -> Result<PathBuf> {
    let traces = read_run_traces(run_dir)?;
    if traces.is_empty() {
        return Err(HarnessError::Trace(format!("{}: no trace files", run_dir.display())));
    }
    let path = run_dir.join("plotdata.csv");
    write_plot_data(&path, &emit_plot_data(&traces))?;
    Ok(path)
}
