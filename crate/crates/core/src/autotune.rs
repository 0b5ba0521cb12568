//! Cost/variance trade-off: sweeping the weight ρ, filtering the Pareto
//! front, fitting `ρ ≈ φ(s) = a·exp(−λ·s²)` over the information
//! `s = 1/Tr(V)` and adapting ρ online.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::RhoUpdateRule;
use crate::estimator::Belief;
use crate::grid::{Network, StateVector};
use crate::oed::{solve_decision, DecisionKind, DecisionOutcome, DecisionProblemSpec, NoiseModel, SensitivityMode};

pub const RHO_MIN: f64 = 1e-8;
pub const RHO_MAX: f64 = 1e8;
/// Log-space fit residual above which a warning is emitted.
pub const FIT_RESIDUAL_WARNING: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutotuneError {
    #[error("every decision solve in the sweep failed")]
    AllSolvesFailed,
    #[error("trade-off fit needs at least 3 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("degenerate trade-off fit: {0}")]
    DegenerateFit(String),
    #[error("horizon exhausted at step {k} of {horizon}")]
    HorizonExhausted { k: usize, horizon: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sweep file: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSample {
    pub rho: f64,
    /// Generation cost [$].
    pub cost: f64,
    /// Predicted trace of the parameter covariance [S²].
    pub trace_v: f64,
}

/// Solves the combined problem once per ρ.
///
/// Every ρ is first solved from each state in `starts`; a second pass restarts
/// each ρ from its neighbours' solutions. The lowest objective wins. Failed
/// solves are dropped with a warning.
pub fn pareto_sweep(
    net: &Network,
    belief: &Belief,
    noise: &NoiseModel,
    mode: SensitivityMode,
    rho_grid: &[f64],
    starts: &[StateVector],
) -> Result<Vec<TradeoffSample>, AutotuneError> {
    if rho_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) || rho_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(AutotuneError::InvalidArgument("rho grid must be positive and sorted ascending".into()));
    }
    let solve = |rho: f64, start: Option<&StateVector>| -> Option<DecisionOutcome> {
        let spec = DecisionProblemSpec {
            kind: DecisionKind::OedOpf { rho },
            belief,
            noise,
            previous_input: None,
            warm_start: start,
            sensitivity: mode,
        };
        solve_decision(net, &spec).ok()
    };
    let better = |a: Option<DecisionOutcome>, b: Option<DecisionOutcome>| match (a, b) {
        (Some(a), Some(b)) => Some(if b.objective < a.objective { b } else { a }),
        (a, b) => a.or(b),
    };
    let first: Vec<Option<DecisionOutcome>> = rho_grid
        .par_iter()
        .map(|&rho| {
            if starts.is_empty() {
                solve(rho, None)
            } else {
                starts.iter().map(|s| solve(rho, Some(s))).fold(None, better)
            }
        })
        .collect();
    let second: Vec<Option<DecisionOutcome>> = (0..rho_grid.len())
        .into_par_iter()
        .map(|i| {
            let neighbours = [i.checked_sub(1), Some(i + 1)];
            let mut best = first[i].clone();
            for j in neighbours.into_iter().flatten() {
                if let Some(Some(n)) = first.get(j) {
                    best = better(best, solve(rho_grid[i], Some(&n.x)));
                }
            }
            best
        })
        .collect();
    let mut samples = Vec::with_capacity(rho_grid.len());
    for (&rho, out) in rho_grid.iter().zip(second) {
        match out {
            Some(o) => samples.push(TradeoffSample { rho, cost: o.cost, trace_v: o.trace_v }),
            None => log::warn!("trade-off sweep: solve failed at rho = {rho:e}; sample dropped"),
        }
    }
    if samples.is_empty() {
        return Err(AutotuneError::AllSolvesFailed);
    }
    Ok(samples)
}

/// Non-dominated subset, sorted by `trace_v` ascending with cost strictly
/// decreasing. Exact duplicates are kept once.
pub fn pareto_filter(samples: &[TradeoffSample]) -> Vec<TradeoffSample> {
    let mut sorted: Vec<&TradeoffSample> = samples.iter().filter(|s| s.cost.is_finite() && s.trace_v.is_finite()).collect();
    sorted.sort_by(|a, b| a.trace_v.total_cmp(&b.trace_v).then(a.cost.total_cmp(&b.cost)));
    let mut front: Vec<TradeoffSample> = Vec::new();
    for s in sorted {
        if front.last().map_or(true, |last| s.cost < last.cost) {
            front.push(s.clone());
        }
    }
    front
}

/// `ρ ≈ φ(s) = a·exp(−λ·s²)` with `s = 1/Tr(V)` the predicted information.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseTradeoffFit {
    pub a: f64,
    pub lambda: f64,
    /// Root-mean-square residual in `log ρ`.
    pub residual: f64,
}

impl InverseTradeoffFit {
    /// `φ(s)`.
    pub fn rho_at(&self, information: f64) -> f64 {
        self.a * (-self.lambda * information * information).exp()
    }

    /// `φ'(s)`.
    pub fn derivative(&self, information: f64) -> f64 {
        -2.0 * self.lambda * information * self.rho_at(information)
    }
}

/// Least squares of `log ρ` on `(1, −s²)` with `s = 1/trace_v`.
pub fn fit_inverse_tradeoff(samples: &[TradeoffSample]) -> Result<InverseTradeoffFit, AutotuneError> {
    if samples.len() < 3 {
        return Err(AutotuneError::InsufficientSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| (1.0 / s.trace_v).powi(2)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.rho.ln()).collect();
    if ys.iter().chain(&xs).any(|v| !v.is_finite()) || samples.iter().any(|s| !(s.trace_v > 0.0)) {
        return Err(AutotuneError::DegenerateFit("non-finite or non-positive sample".into()));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 1e-24 * xs.iter().map(|x| x * x).sum::<f64>()) {
        return Err(AutotuneError::DegenerateFit("all samples share the same variance".into()));
    }
    let slope = sxy / sxx;
    let lambda = -slope;
    if !(lambda > 0.0) {
        return Err(AutotuneError::DegenerateFit(format!("fitted lambda = {lambda:e} is not positive")));
    }
    let log_a = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - log_a - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    if residual > FIT_RESIDUAL_WARNING {
        log::warn!("trade-off fit residual {residual:.3} in log(rho) exceeds {FIT_RESIDUAL_WARNING}");
    }
    Ok(InverseTradeoffFit { a: log_a.exp(), lambda, residual })
}

/// Online controller for ρ driven by the per-step information deficit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoController {
    pub rho: f64,
    /// Experiment steps completed; advanced by each update.
    pub k: usize,
    pub horizon: usize,
    pub target_trace: f64,
    /// Average information to collect per step, fixed at construction.
    pub i0: f64,
    pub fit: InverseTradeoffFit,
    pub rule: RhoUpdateRule,
}

impl RhoController {
    /// `I₀ = (1/N)(1/V_target − 1/Tr(V₀))`.
    pub fn new(
        rho: f64,
        horizon: usize,
        target_trace: f64,
        initial_trace: f64,
        fit: InverseTradeoffFit,
        rule: RhoUpdateRule,
    ) -> Self {
        let i0 = (1.0 / target_trace - 1.0 / initial_trace) / horizon as f64;
        Self { rho: clamp_rho(rho), k: 0, horizon, target_trace, i0, fit, rule }
    }

    /// Information per remaining step still needed after observing `trace_v_plus`.
    pub fn information_deficit(&self, trace_v_plus: f64) -> f64 {
        (1.0 / self.target_trace - 1.0 / trace_v_plus) / (self.horizon - self.k) as f64
    }

    /// Applies one update and returns the new ρ.
    pub fn rho_update(&mut self, trace_v_plus: f64) -> Result<f64, AutotuneError> {
        if self.k >= self.horizon {
            return Err(AutotuneError::HorizonExhausted { k: self.k, horizon: self.horizon });
        }
        if !(trace_v_plus > 0.0) {
            return Err(AutotuneError::InvalidArgument(format!("trace must be positive, got {trace_v_plus}")));
        }
        let i_plus = self.information_deficit(trace_v_plus);
        let error = i_plus - self.i0;
        let step = match self.rule {
            // A deficit (I⁺ > I₀) lowers ρ and so weights the variance more.
            RhoUpdateRule::SignCorrected => -self.fit.derivative(1.0 / trace_v_plus).abs() * error,
            RhoUpdateRule::Literal => self.fit.derivative(i_plus) * error,
        };
        let next = self.rho + step;
        self.rho = if next.is_finite() { clamp_rho(next) } else { self.rho };
        self.k += 1;
        Ok(self.rho)
    }
}

pub fn clamp_rho(rho: f64) -> f64 {
    if rho.is_nan() {
        return RHO_MIN;
    }
    rho.clamp(RHO_MIN, RHO_MAX)
}

#[derive(Serialize, Deserialize)]
struct SweepRow {
    rho: f64,
    cost: f64,
    trace_v: f64,
    filtered: bool,
}

/// Writes the sweep as CSV with columns `rho,cost,trace_v,filtered`, where
/// `filtered` marks members of the Pareto front.
pub fn write_sweep_csv<W: Write>(samples: &[TradeoffSample], out: W) -> Result<(), AutotuneError> {
    let front = pareto_filter(samples);
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        let filtered = front.iter().any(|f| f == s);
        w.serialize(SweepRow { rho: s.rho, cost: s.cost, trace_v: s.trace_v, filtered })
            .map_err(|e| AutotuneError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| AutotuneError::Io(e.to_string()))
}

/// Reads a sweep CSV; returns all samples and the flags.
pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<(TradeoffSample, bool)>, AutotuneError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<SweepRow>()
        .map(|row| {
            row.map(|s| (TradeoffSample { rho: s.rho, cost: s.cost, trace_v: s.trace_v }, s.filtered))
                .map_err(|e| AutotuneError::Io(e.to_string()))
        })
        .collect()
}
