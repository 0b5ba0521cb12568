use serde::{Deserialize, Serialize};

use super::{ConfigError, GridCase};
use crate::grid::LineParams;

/// Which input-selection rule drives the experiment loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Economic dispatch followed by estimation.
    OpfMle,
    /// Pure experiment design, agnostic to cost.
    PureOed,
    /// Cost plus weighted predicted variance, weight adapted online.
    OedOpfAutotuned,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OpfMle, Strategy::OedOpfAutotuned, Strategy::PureOed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OpfMle => "opf_mle",
            Strategy::PureOed => "pure_oed",
            Strategy::OedOpfAutotuned => "oed_opf_autotuned",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| ConfigError::OutOfRange {
            field: "strategy".into(),
            reason: format!("unknown strategy `{s}`"),
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the feedback gain enters the weight update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoUpdateRule {
    /// Gain is `|φ'|` at the current information `1/Tr(V⁺)`; an information
    /// deficit always lowers ρ.
    #[default]
    SignCorrected,
    /// Gain is `φ'(I⁺)`, the fitted curve's derivative at the per-step deficit.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for RhoGrid {
    fn default() -> Self {
        Self { min: 1e-4, max: 1e2, points: 25 }
    }
}

impl RhoGrid {
    /// Log-spaced values from `min` to `max` inclusive.
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (a, b) = (self.min.ln(), self.max.ln());
        (0..self.points).map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp()).collect()
    }
}

/// Explicit per-line parameters, both arrays in case line order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    pub conductance: Option<Vec<f64>>,
    pub susceptance: Option<Vec<f64>>,
}

impl ParamsOverride {
    fn to_params(&self, table: &str) -> Result<LineParams, ConfigError> {
        let g = self.conductance.as_ref().ok_or_else(|| ConfigError::MissingField(format!("{table}.conductance")))?;
        let b = self.susceptance.as_ref().ok_or_else(|| ConfigError::MissingField(format!("{table}.susceptance")))?;
        if g.len() != b.len() {
            return Err(ConfigError::OutOfRange {
                field: table.into(),
                reason: format!("{} conductances but {} susceptances", g.len(), b.len()),
            });
        }
        Ok(LineParams::new(g, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of experiment steps `N`.
    pub horizon: usize,
    /// Target trace of the parameter covariance [S²].
    pub target_variance_trace: f64,
    pub rho0: f64,
    /// Stop once the trace of the covariance falls below this.
    pub termination_eps: f64,
    /// Diagonal measurement-noise variance.
    pub noise_variance: f64,
    /// Diagonal prior parameter variance.
    pub prior_variance: f64,
    /// Weight on active set-point changes in the pure design problem [1/p.u.²].
    pub input_change_weight: f64,
    pub rng_seed: u64,
    pub strategy: Strategy,
    /// Use the sensitivity without the direct measurement-parameter term.
    pub paper_strict_sensitivity: bool,
    pub rho_update_rule: RhoUpdateRule,
    /// Re-run the trade-off sweep and fit every this many steps (0: first step only).
    pub refit_every: usize,
    pub rho_grid: RhoGrid,
    /// Grid time per experiment step, used only for reporting.
    pub sample_minutes: f64,
    /// Ground truth for simulation; defaults to the case's branch data.
    pub true_params: Option<ParamsOverride>,
    /// Initial estimate; defaults to the across-line average of the case data.
    pub initial_params: Option<ParamsOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            target_variance_trace: 1.0,
            rho0: 1e-4,
            termination_eps: 1e-6,
            noise_variance: 1e-4,
            prior_variance: 1e20,
            input_change_weight: 0.1,
            rng_seed: 0,
            strategy: Strategy::OedOpfAutotuned,
            paper_strict_sensitivity: false,
            rho_update_rule: RhoUpdateRule::SignCorrected,
            refit_every: 0,
            rho_grid: RhoGrid::default(),
            sample_minutes: 15.0,
            true_params: None,
            initial_params: None,
        }
    }
}

fn out_of_range(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange { field: field.into(), reason: reason.into() }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(out_of_range(field, format!("must be a positive finite number, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon < 1 {
            return Err(out_of_range("horizon", "must be at least 1"));
        }
        positive("target_variance_trace", self.target_variance_trace)?;
        positive("rho0", self.rho0)?;
        positive("termination_eps", self.termination_eps)?;
        positive("noise_variance", self.noise_variance)?;
        positive("prior_variance", self.prior_variance)?;
        positive("sample_minutes", self.sample_minutes)?;
        if !(self.input_change_weight >= 0.0 && self.input_change_weight.is_finite()) {
            return Err(out_of_range("input_change_weight", "must be non-negative"));
        }
        positive("rho_grid.min", self.rho_grid.min)?;
        positive("rho_grid.max", self.rho_grid.max)?;
        if self.rho_grid.points == 0 || self.rho_grid.min > self.rho_grid.max {
            return Err(out_of_range("rho_grid", "need at least one point and min <= max"));
        }
        if let Some(p) = &self.true_params {
            p.to_params("true_params")?;
        }
        if let Some(p) = &self.initial_params {
            p.to_params("initial_params")?;
        }
        Ok(())
    }

    /// Ground-truth parameters for `case`, validated against its topology.
    pub fn truth_for(&self, case: &GridCase) -> Result<LineParams, ConfigError> {
        let y = match &self.true_params {
            Some(p) => p.to_params("true_params")?,
            None => case.nominal_params(),
        };
        check_params("true_params", &y, case)?;
        Ok(y)
    }

    pub fn initial_estimate_for(&self, case: &GridCase) -> Result<LineParams, ConfigError> {
        let y = match &self.initial_params {
            Some(p) => p.to_params("initial_params")?,
            None => case.average_params(),
        };
        check_params("initial_params", &y, case)?;
        Ok(y)
    }

    /// Experiment-step duration in hours.
    pub fn hours_for_steps(&self, steps: usize) -> f64 {
        steps as f64 * self.sample_minutes / 60.0
    }
}

fn check_params(field: &str, y: &LineParams, case: &GridCase) -> Result<(), ConfigError> {
    if y.n_lines() != case.n_lines() {
        return Err(out_of_range(field, format!("{} lines given, case has {}", y.n_lines(), case.n_lines())));
    }
    for (i, (&g, &b)) in y.conductances().iter().zip(y.susceptances()).enumerate() {
        if !(g > 0.0 && g.is_finite()) {
            return Err(out_of_range(field, format!("line {}: conductance must be positive, got {g}", i + 1)));
        }
        if !b.is_finite() {
            return Err(out_of_range(field, format!("line {}: non-finite susceptance", i + 1)));
        }
        if b >= 0.0 {
            log::warn!("{field}: line {} has non-negative susceptance {b}", i + 1);
        }
    }
    Ok(())
}

/// Parses a TOML experiment configuration; every absent key takes its default.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if let Some(tag) = table.remove("format") {
        if tag.as_str() != Some(CONFIG_FORMAT) {
            return Err(ConfigError::Syntax(format!("format tag {tag} (expected \"{CONFIG_FORMAT}\")")));
        }
    }
    let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub const CONFIG_FORMAT: &str = "oedopf-config/1";
