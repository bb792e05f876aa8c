//! Experiment specs: a base simulation config plus sweep axes, read from a
//! single JSON file. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use hcef_core::controller::Scheme;
use hcef_core::protocol::SimulationConfig;
use hcef_core::topology::GraphSpec;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Values swept over. An absent axis keeps the base config's value; an
/// empty list is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schemes: Option<Vec<Scheme>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    /// Edge probabilities of random backhaul graphs; overrides the base topology.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_edges: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qs: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taus: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

/// Thresholds for the time- and energy-to-target summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Settings of the `oracle` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub instances: usize,
    pub max_devices: usize,
    pub grid_step: f64,
    pub tolerance: f64,
    pub required_pass_rate: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { instances: 100, max_devices: 3, grid_step: 0.01, tolerance: 1e-3, required_pass_rate: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: SimulationConfig,
    pub sweep: SweepAxes,
    pub output_dir: PathBuf,
    pub targets: Targets,
    pub oracle: OracleSettings,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            base: SimulationConfig::default(),
            sweep: SweepAxes::default(),
            output_dir: PathBuf::from("runs"),
            targets: Targets::default(),
            oracle: OracleSettings::default(),
        }
    }
}

/// Sweep coordinates of a cell, seed excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub scheme: Scheme,
    pub beta: f64,
    pub p_edge: Option<f64>,
    pub q: usize,
    pub tau: usize,
}

impl CellKey {
    /// File-name-safe identifier.
    pub fn label(&self) -> String {
        let topo = match self.p_edge {
            Some(p) => format!("p{p}"),
            None => "base".into(),
        };
        format!("{}_b{}_{}_q{}_t{}", self.scheme, self.beta, topo, self.q, self.tau)
    }
}

/// One simulation of the sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub key: CellKey,
    pub seed: u64,
    pub config: SimulationConfig,
}

impl Cell {
    pub fn run_label(&self) -> String {
        format!("{}__seed{}", self.key.label(), self.seed)
    }
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, default: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![default]),
        Some(v) if v.is_empty() => Err(HarnessError::Config(format!("sweep axis `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        for cell in self.cells()? {
            cell.config.validate().map_err(|e| HarnessError::Config(format!("{}: {e}", cell.run_label())))?;
        }
        if let Some(t) = self.targets.accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(HarnessError::Config(format!("targets.accuracy must be in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    /// Every (cell, seed) in sweep order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let b = &self.base;
        let base_p = match b.topology {
            GraphSpec::ErdosRenyi { p_edge } => Some(p_edge),
            _ => None,
        };
        let schemes = axis("schemes", &self.sweep.schemes, b.scheme)?;
        let betas = axis("betas", &self.sweep.betas, b.data.beta)?;
        let p_edges: Vec<Option<f64>> = match &self.sweep.p_edges {
            None => vec![base_p],
            Some(v) if v.is_empty() => return Err(HarnessError::Config("sweep axis `p_edges` is empty".into())),
            Some(v) => v.iter().copied().map(Some).collect(),
        };
        let qs = axis("qs", &self.sweep.qs, b.q)?;
        let taus = axis("taus", &self.sweep.taus, b.tau)?;
        let seeds = axis("seeds", &self.sweep.seeds, b.seed)?;
        let mut cells = Vec::new();
        for &scheme in &schemes {
            for &beta in &betas {
                for &p_edge in &p_edges {
                    for &q in &qs {
                        for &tau in &taus {
                            let key = CellKey { scheme, beta, p_edge, q, tau };
                            for &seed in &seeds {
                                let mut config = b.clone();
                                config.scheme = scheme;
                                config.data.beta = beta;
                                if let Some(p_edge) = p_edge {
                                    config.topology = GraphSpec::ErdosRenyi { p_edge };
                                }
                                config.q = q;
                                config.tau = tau;
                                config.seed = seed;
                                cells.push(Cell { key, seed, config });
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Parses and validates an experiment spec. Errors name the offending key.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&text)
}

/// Pretty JSON with every default filled in.
pub fn emit_config(spec: &ExperimentSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(spec)?)
}
