//! The closed experiment loop: simulate the true grid at the applied input,
//! estimate, then pick the next input by the configured strategy.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autotune::{fit_inverse_tradeoff, pareto_filter, pareto_sweep, InverseTradeoffFit, RhoController, TradeoffSample};
use crate::case_io::{ConfigError, ExperimentConfig, GridCase, Strategy};
use crate::estimator::{mle_update, Belief};
use crate::grid::{InputVector, LineParams, MeasurementVector, Network, StateVector};
use crate::oed::{
    generation_cost, slack_generation, solve_decision, DecisionKind, DecisionOutcome, DecisionProblemSpec, NoiseModel,
    SensitivityMode,
};
use crate::powerflow::{solve_power_flow, PfError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("power flow at the true parameters failed: {0}")]
    PfFailure(#[from] PfError),
    #[error("estimation failed: {0}")]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error("decision problem failed: {0}")]
    Decision(#[from] crate::oed::OedError),
    #[error("autotuning failed: {0}")]
    Autotune(#[from] crate::autotune::AutotuneError),
    #[error("relative error undefined: true value of parameter {0} is zero")]
    ZeroTruthEntry(usize),
    #[error("covariance trace increased from {previous} to {current} at step {k}")]
    InformationLoss { k: usize, previous: f64, current: f64 },
    #[error("covariance is not positive definite at step {0}")]
    SingularInformation(usize),
    #[error("output: {0}")]
    Output(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    TargetReached,
    Horizon,
    EpsTolerance,
    /// A module error ended the run; the records up to it are kept.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub strategy: Strategy,
    /// Weight in effect when this step's input was chosen; absent for the
    /// fixed strategies.
    pub rho: Option<f64>,
    pub u: InputVector,
    pub eta: MeasurementVector,
    pub estimate: LineParams,
    /// `Tr(V⁺)` after this step's update [S²].
    pub trace_v: f64,
    /// Generation cost of the applied input at the true grid [$].
    pub step_cost: f64,
    pub cumulative_cost: f64,
    pub mre_g: f64,
    pub mre_b: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineEstimate {
    pub from: usize,
    pub to: usize,
    pub g_true: f64,
    pub g_est: f64,
    pub b_true: f64,
    pub b_est: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub terminated_at: usize,
    pub reason: TerminationReason,
    /// Grid time covered by the run [h].
    pub hours: f64,
    pub final_estimates: Vec<LineEstimate>,
    pub sweep: Option<Vec<TradeoffSample>>,
    pub fit: Option<InverseTradeoffFit>,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// `η = M(x_s(u, y_true), y_true) + w`, with `w` drawn from stream `k` of the
/// ChaCha generator seeded by `seed`. Returns the measurement and the true state.
pub fn simulate_measurement(
    net: &Network,
    y_true: &LineParams,
    u: &InputVector,
    noise: &NoiseModel,
    seed: u64,
    k: u64,
    warm_start: Option<&StateVector>,
) -> Result<(MeasurementVector, StateVector), PfError> {
    let pf = solve_power_flow(net, y_true, u, warm_start).or_else(|_| solve_power_flow(net, y_true, u, None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let mut eta = net.measurement(&pf.x, y_true);
    for (m, var) in eta.0.iter_mut().zip(&noise.variances) {
        let w: f64 = rng.sample(StandardNormal);
        *m += var.sqrt() * w;
    }
    Ok((eta, pf.x))
}

/// `(1/|L|) Σ |g − ḡ|/|ḡ|` and the same for `b`.
pub fn mean_relative_errors(y_est: &LineParams, y_true: &LineParams) -> Result<(f64, f64), RunError> {
    if y_est.len() != y_true.len() {
        return Err(RunError::Output(format!("{} estimates for {} parameters", y_est.len(), y_true.len())));
    }
    if let Some(i) = y_true.as_slice().iter().position(|&v| v == 0.0) {
        return Err(RunError::ZeroTruthEntry(i));
    }
    let mre = |est: &[f64], tru: &[f64]| {
        est.iter().zip(tru).map(|(e, t)| ((e - t) / t).abs()).sum::<f64>() / tru.len() as f64
    };
    Ok((
        mre(y_est.conductances(), y_true.conductances()),
        mre(y_est.susceptances(), y_true.susceptances()),
    ))
}

/// Per-line relative errors `|ĝ − g|/|g|` followed by the same for `b`.
pub fn relative_errors(y_est: &LineParams, y_true: &LineParams) -> Vec<f64> {
    y_est.as_slice().iter().zip(y_true.as_slice()).map(|(e, t)| ((e - t) / t).abs()).collect()
}

/// Relative slack on the covariance-trace monotonicity check, for rounding.
const MONOTONICITY_SLACK: f64 = 1e-9;

struct Loop<'a> {
    net: &'a Network,
    config: &'a ExperimentConfig,
    noise: NoiseModel,
    mode: SensitivityMode,
    strategy: Strategy,
    seed: u64,
}

impl Loop<'_> {
    fn decide(
        &self,
        kind: DecisionKind,
        belief: &Belief,
        previous: &InputVector,
        starts: &[&StateVector],
    ) -> Result<DecisionOutcome, RunError> {
        let mut best: Option<DecisionOutcome> = None;
        let mut last_err = None;
        for start in starts {
            let spec = DecisionProblemSpec {
                kind,
                belief,
                noise: &self.noise,
                previous_input: Some(previous),
                warm_start: Some(start),
                sensitivity: self.mode,
            };
            match solve_decision(self.net, &spec) {
                Ok(o) => {
                    if best.as_ref().map_or(true, |b| o.objective < b.objective) {
                        best = Some(o);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match (best, last_err) {
            (Some(b), _) => Ok(b),
            (None, Some(e)) => Err(e.into()),
            (None, None) => unreachable!("at least one start"),
        }
    }
}

/// Runs the configured strategy on `case` to termination.
///
/// Errors during setup are returned directly; errors inside the loop end the
/// run with [`TerminationReason::Aborted`] and keep the records so far.
pub fn run_algorithm(case: &GridCase, config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let truth = config.truth_for(case)?;
    let initial = config.initial_estimate_for(case)?;
    let net = Network::new(case);
    let lp = Loop {
        net: &net,
        config,
        noise: NoiseModel::isotropic(config.noise_variance, net.n_measurements()),
        mode: if config.paper_strict_sensitivity { SensitivityMode::PaperStrict } else { SensitivityMode::Total },
        strategy: config.strategy,
        seed: config.rng_seed,
    };
    let mut summary = RunSummary {
        strategy: config.strategy,
        seed: config.rng_seed,
        records: Vec::new(),
        terminated_at: 0,
        reason: TerminationReason::Aborted,
        hours: 0.0,
        final_estimates: Vec::new(),
        sweep: None,
        fit: None,
        error: None,
    };
    let belief = Belief::isotropic(initial, config.prior_variance);
    if let Err(e) = run_loop(&lp, &truth, belief, &mut summary) {
        log::warn!("run aborted after {} steps: {e}", summary.records.len());
        summary.reason = TerminationReason::Aborted;
        summary.error = Some(e.to_string());
    }
    summary.terminated_at = summary.records.len();
    summary.hours = config.hours_for_steps(summary.terminated_at);
    let last = summary.records.last().map(|r| r.estimate.clone());
    if let Some(est) = last {
        summary.final_estimates = net
            .line_endpoints()
            .into_iter()
            .enumerate()
            .map(|(i, (from, to))| LineEstimate {
                from,
                to,
                g_true: truth.g(i),
                g_est: est.g(i),
                b_true: truth.b(i),
                b_est: est.b(i),
            })
            .collect();
    }
    Ok(summary)
}

fn run_loop(lp: &Loop<'_>, truth: &LineParams, mut belief: Belief, summary: &mut RunSummary) -> Result<(), RunError> {
    let config = lp.config;
    let net = lp.net;
    let zero_input = net.input_projected(vec![0.0; net.n_state()]);
    let initial_trace = belief.covariance_trace().ok_or(RunError::SingularInformation(0))?;

    // First input: economic dispatch at the prior mean.
    let opf0 = lp.decide(DecisionKind::Opf, &belief, &zero_input, &[&net.flat_state()])?;
    let opf_state = opf0.x.clone();
    let mut u = opf0.u;
    let mut x_decision = opf0.x;
    let mut x_true_prev: Option<StateVector> = None;
    let mut previous_trace = initial_trace;
    let mut cumulative = 0.0;
    let mut controller: Option<RhoController> = None;
    let mut rho_in_effect = (lp.strategy == Strategy::OedOpfAutotuned).then_some(config.rho0);

    for k in 1..=config.horizon {
        let started = Instant::now();
        let warm = x_true_prev.as_ref().unwrap_or(&x_decision);
        let (eta, x_true) = simulate_measurement(net, truth, &u, &lp.noise, lp.seed, k as u64, Some(warm))?;
        let (slack_p, _) = slack_generation(net, &x_true, truth);
        let step_cost = generation_cost(net, &u, slack_p);
        cumulative += step_cost;

        let update = mle_update(net, &belief, &u, &eta, &lp.noise, lp.mode)?;
        belief = update.belief;
        let trace_v = belief.covariance_trace().ok_or(RunError::SingularInformation(k))?;
        if trace_v > previous_trace * (1.0 + MONOTONICITY_SLACK) {
            return Err(RunError::InformationLoss { k, previous: previous_trace, current: trace_v });
        }
        previous_trace = trace_v;
        let (mre_g, mre_b) = mean_relative_errors(&belief.mean, truth)?;
        summary.records.push(IterationRecord {
            k,
            strategy: lp.strategy,
            rho: rho_in_effect,
            u: u.clone(),
            eta,
            estimate: belief.mean.clone(),
            trace_v,
            step_cost,
            cumulative_cost: cumulative,
            mre_g,
            mre_b,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        x_true_prev = Some(x_true);

        if trace_v < config.termination_eps {
            summary.reason = TerminationReason::EpsTolerance;
            return Ok(());
        }
        if trace_v <= config.target_variance_trace {
            summary.reason = TerminationReason::TargetReached;
            return Ok(());
        }
        if k == config.horizon {
            summary.reason = TerminationReason::Horizon;
            return Ok(());
        }

        let starts = [&x_decision, &opf_state];
        let next = match lp.strategy {
            Strategy::OpfMle => lp.decide(DecisionKind::Opf, &belief, &u, &starts[..1])?,
            Strategy::PureOed => {
                lp.decide(DecisionKind::Oed { input_change_weight: config.input_change_weight }, &belief, &u, &starts)?
            }
            Strategy::OedOpfAutotuned => {
                let refit = controller.is_none() || config.refit_every > 0 && (k - 1) % config.refit_every == 0;
                if refit {
                    let samples = pareto_sweep(
                        net,
                        &belief,
                        &lp.noise,
                        lp.mode,
                        &config.rho_grid.values(),
                        &[x_decision.clone(), opf_state.clone()],
                    )?;
                    if summary.sweep.is_none() {
                        summary.sweep = Some(samples.clone());
                    }
                    let fit = fit_inverse_tradeoff(&pareto_filter(&samples))?;
                    log::info!("trade-off fit at step {k}: a = {:e}, lambda = {:e}, residual {:.3}", fit.a, fit.lambda, fit.residual);
                    let c = match controller.take() {
                        Some(c) => RhoController { fit, ..c },
                        None => RhoController::new(
                            config.rho0,
                            config.horizon,
                            config.target_variance_trace,
                            initial_trace,
                            fit,
                            config.rho_update_rule,
                        ),
                    };
                    controller = Some(c);
                    if summary.fit.is_none() {
                        summary.fit = Some(fit);
                    }
                }
                let c = controller.as_mut().expect("controller initialised above");
                // Steps completed so far; the deficit is spread over the rest.
                c.k = k;
                let rho = c.rho_update(trace_v)?;
                rho_in_effect = Some(rho);
                lp.decide(DecisionKind::OedOpf { rho }, &belief, &u, &starts)?
            }
        };
        u = next.u;
        x_decision = next.x;
    }
    unreachable!("loop returns at the horizon")
}

/// Runs one configuration per seed, in parallel.
pub fn run_batch(case: &GridCase, config: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<RunSummary, RunError>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ExperimentConfig { rng_seed: seed, ..config.clone() };
            run_algorithm(case, &cfg)
        })
        .collect()
}

/// Column order of [`write_iterations_csv`] for a network with `n_inputs`
/// input entries, `n_measurements` channels and `n_lines` lines.
pub fn iteration_csv_header(n_inputs: usize, n_measurements: usize, n_lines: usize) -> Vec<String> {
    let mut h: Vec<String> = ["k", "strategy", "rho", "trace_v", "step_cost", "cumulative_cost", "mre_g", "mre_b", "wall_time_s"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_inputs).map(|i| format!("u_{i}")));
    h.extend((0..n_measurements).map(|i| format!("eta_{i}")));
    h.extend((0..n_lines).map(|i| format!("g_{}", i + 1)));
    h.extend((0..n_lines).map(|i| format!("b_{}", i + 1)));
    h
}

/// One row per record. Floats use the shortest representation that
/// round-trips, independent of locale.
pub fn write_iterations_csv<W: Write>(records: &[IterationRecord], out: W) -> Result<(), RunError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| RunError::Output(e.to_string());
    if let Some(first) = records.first() {
        w.write_record(iteration_csv_header(first.u.as_slice().len(), first.eta.len(), first.estimate.n_lines()))
            .map_err(err)?;
    }
    for r in records {
        let mut row = vec![
            r.k.to_string(),
            r.strategy.to_string(),
            r.rho.map(|v| v.to_string()).unwrap_or_default(),
            r.trace_v.to_string(),
            r.step_cost.to_string(),
            r.cumulative_cost.to_string(),
            r.mre_g.to_string(),
            r.mre_b.to_string(),
            r.wall_time_s.to_string(),
        ];
        row.extend(r.u.as_slice().iter().map(f64::to_string));
        row.extend(r.eta.as_slice().iter().map(f64::to_string));
        row.extend(r.estimate.as_slice().iter().map(f64::to_string));
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| RunError::Output(e.to_string()))
}

pub fn write_summary_json<W: Write>(summary: &RunSummary, out: W) -> Result<(), RunError> {
    serde_json::to_writer_pretty(out, summary).map_err(|e| RunError::Output(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mre_of_truth_is_zero_and_scale_free() {
        let y = LineParams::new(&[1.0, 2.0], &[-10.0, -20.0]);
        assert_eq!(mean_relative_errors(&y, &y).unwrap(), (0.0, 0.0));
        let est = LineParams::new(&[1.1, 2.0], &[-10.0, -18.0]);
        let (g, b) = mean_relative_errors(&est, &y).unwrap();
        let (g2, b2) = mean_relative_errors(&est.map(|v| 2.0 * v), &y.map(|v| 2.0 * v)).unwrap();
        assert!((g - 0.05).abs() < 1e-12 && (b - 0.05).abs() < 1e-12);
        assert!((g - g2).abs() < 1e-15 && (b - b2).abs() < 1e-15);
    }

    #[test]
    fn zero_truth_is_an_error() {
        let y = LineParams::new(&[0.0], &[-1.0]);
        assert!(matches!(mean_relative_errors(&y, &y), Err(RunError::ZeroTruthEntry(0))));
    }
}
