//! Grid case and experiment configuration input.
//!
//! Two case formats are accepted: a MATPOWER subset (`baseMVA`, `bus`, `gen`,
//! `branch`, `gencost`) and the native TOML document written by
//! [`write_native_case`], which is the canonical round-trip format.

mod config;
mod matpower;
mod native;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{parse_experiment_config, ExperimentConfig, ParamsOverride, RhoGrid, RhoUpdateRule, Strategy};
pub use matpower::parse_matpower_case;
pub use native::{parse_native_case, write_native_case, NATIVE_CASE_FORMAT};

use crate::grid::LineParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("malformed `{block}` block (row {row}): {reason}")]
    MalformedBlock { block: String, row: usize, reason: String },
    #[error("inconsistent topology: {0}")]
    InconsistentTopology(String),
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("invalid native case document: {0}")]
    Native(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("`{field}` out of range: {reason}")]
    OutOfRange { field: String, reason: String },
    #[error("invalid configuration document: {0}")]
    Syntax(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    /// 1-based bus number.
    pub index: usize,
    /// Active demand [p.u.].
    pub p_demand: f64,
    /// Reactive demand [p.u.].
    pub q_demand: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// A transmission line with its series admittance `g + jb` [p.u.].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub conductance: f64,
    pub susceptance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Quadratic cost coefficient, applied to generation in MW.
    pub cost_quadratic: f64,
    /// Linear cost coefficient, applied to generation in MW.
    pub cost_linear: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    /// System base [MVA].
    pub base_power: f64,
    pub slack_bus: usize,
    /// Fixed voltage magnitude at the slack bus [p.u.].
    pub slack_voltage: f64,
    /// Symmetric bound on non-slack voltage angles [rad].
    pub angle_limit: f64,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub generators: Vec<GenSpec>,
}

pub const DEFAULT_ANGLE_LIMIT: f64 = std::f64::consts::FRAC_PI_2;

/// `(g, b)` of the series admittance `1 / (r + jx)`.
pub fn series_admittance(r: f64, x: f64) -> (f64, f64) {
    let z2 = r * r + x * x;
    (r / z2, -x / z2)
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn generator_at(&self, bus: usize) -> Option<&GenSpec> {
        self.generators.iter().find(|g| g.bus == bus)
    }

    /// Line parameters carried by the case data.
    pub fn nominal_params(&self) -> LineParams {
        let g: Vec<f64> = self.lines.iter().map(|l| l.conductance).collect();
        let b: Vec<f64> = self.lines.iter().map(|l| l.susceptance).collect();
        LineParams::new(&g, &b)
    }

    /// Every line set to the mean conductance and mean susceptance.
    pub fn average_params(&self) -> LineParams {
        let n = self.lines.len().max(1) as f64;
        let g = self.lines.iter().map(|l| l.conductance).sum::<f64>() / n;
        let b = self.lines.iter().map(|l| l.susceptance).sum::<f64>() / n;
        LineParams::new(&vec![g; self.lines.len()], &vec![b; self.lines.len()])
    }

    /// Checks the structural invariants. Sorts buses by index.
    pub fn validate(&mut self) -> Result<(), CaseError> {
        use CaseError::InconsistentTopology as Topo;
        if !(self.base_power > 0.0) || !self.base_power.is_finite() {
            return Err(Topo(format!("base power must be positive, got {}", self.base_power)));
        }
        if self.buses.is_empty() {
            return Err(Topo("case has no buses".into()));
        }
        self.buses.sort_by_key(|b| b.index);
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.index != i + 1 {
                return Err(Topo(format!(
                    "bus indices must be unique and contiguous from 1; found {} at position {}",
                    bus.index,
                    i + 1
                )));
            }
            if !(bus.v_min <= bus.v_max) || !(bus.v_min > 0.0) {
                return Err(Topo(format!("bus {}: invalid voltage bounds [{}, {}]", bus.index, bus.v_min, bus.v_max)));
            }
            if !bus.p_demand.is_finite() || !bus.q_demand.is_finite() {
                return Err(Topo(format!("bus {}: non-finite demand", bus.index)));
            }
        }
        let n = self.buses.len();
        let exists = |b: usize| (1..=n).contains(&b);
        if !exists(self.slack_bus) {
            return Err(Topo(format!("slack bus {} does not exist", self.slack_bus)));
        }
        if !(self.slack_voltage > 0.0) {
            return Err(Topo(format!("slack voltage must be positive, got {}", self.slack_voltage)));
        }
        if !(self.angle_limit > 0.0 && self.angle_limit < std::f64::consts::PI) {
            return Err(Topo(format!("angle limit must lie in (0, pi), got {}", self.angle_limit)));
        }
        let mut seen = std::collections::HashSet::new();
        for line in &self.lines {
            if !exists(line.from) || !exists(line.to) {
                return Err(Topo(format!("line ({}, {}) refers to a missing bus", line.from, line.to)));
            }
            if line.from == line.to {
                return Err(Topo(format!("self-loop at bus {}", line.from)));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(Topo(format!("more than one line between buses {} and {}", key.0, key.1)));
            }
            if !line.conductance.is_finite() || !line.susceptance.is_finite() {
                return Err(Topo(format!("line ({}, {}) has non-finite admittance", line.from, line.to)));
            }
            if line.susceptance > 0.0 {
                log::warn!(
                    "line ({}, {}) has positive susceptance {}; lines are expected to be inductive",
                    line.from,
                    line.to,
                    line.susceptance
                );
            }
        }
        let mut gen_buses = std::collections::HashSet::new();
        for gen in &self.generators {
            if !exists(gen.bus) {
                return Err(Topo(format!("generator at missing bus {}", gen.bus)));
            }
            if !gen_buses.insert(gen.bus) {
                return Err(CaseError::UnsupportedFeature(format!("more than one generator at bus {}", gen.bus)));
            }
            if !(gen.p_min <= gen.p_max) || !(gen.q_min <= gen.q_max) {
                return Err(Topo(format!("generator at bus {}: lower bound exceeds upper bound", gen.bus)));
            }
        }
        if !gen_buses.contains(&self.slack_bus) {
            return Err(Topo(format!("slack bus {} hosts no generator", self.slack_bus)));
        }
        Ok(())
    }
}

/// MATPOWER source of the bundled five-bus benchmark.
pub const CASE5_MATPOWER: &str = include_str!("../../data/case5.m");

/// The bundled five-bus benchmark case.
pub fn case5() -> GridCase {
    parse_matpower_case(CASE5_MATPOWER).expect("bundled case parses")
}
