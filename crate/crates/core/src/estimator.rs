//! Maximum-likelihood estimation of line parameters from one noisy snapshot,
//! with a Gaussian prior carried in information form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{InputVector, LineParams, MeasurementVector, Network, StateVector};
use crate::linalg::Matrix;
use crate::nlp::{self, NlpError, NlpOptions, NlpProblem};
use crate::oed::{self, state_bounds, NoiseModel, OedError, SensitivityMode};
use crate::powerflow::solve_power_flow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("estimation NLP failed: {0}")]
    NlpFailure(#[from] NlpError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Sensitivity(#[from] OedError),
}

/// Gaussian belief over the line parameters: mean `ŷ` and information `Σ⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub mean: LineParams,
    pub information: Matrix<f64>,
}

impl Belief {
    /// Isotropic prior `Σ₀ = variance · I`.
    pub fn isotropic(mean: LineParams, variance: f64) -> Self {
        let n = mean.len();
        Self { mean, information: Matrix::identity(n).scale(1.0 / variance) }
    }

    /// `Tr(Σ)`, or `None` when the information is not positive definite.
    pub fn covariance_trace(&self) -> Option<f64> {
        self.information.cholesky().map(|c| c.trace_of_inverse())
    }

    pub fn covariance(&self) -> Option<Matrix<f64>> {
        self.information.cholesky().map(|c| c.inverse())
    }
}

/// Stopping accuracy of the estimation NLP, tighter than the decision problems.
pub const ESTIMATOR_TOLERANCE: f64 = 1e-7;
/// Relative widening of the state bounds during estimation.
pub const STATE_BOUND_RELAXATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleOutcome {
    /// Estimated state at the measured operating point.
    pub x: StateVector,
    pub belief: Belief,
    /// Value of the negative log-likelihood (up to constants) at the optimum.
    pub objective: f64,
    pub kkt_residual: f64,
}

struct MleNlp<'a> {
    net: &'a Network,
    prior: &'a Belief,
    target: Vec<f64>,
    eta: &'a [f64],
    weights: Vec<f64>,
    z0: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl MleNlp<'_> {
    fn split(&self, z: &[f64]) -> (StateVector, LineParams) {
        let nx = self.net.n_state();
        (StateVector(z[..nx].to_vec()), LineParams::from_flat(z[nx..].to_vec()))
    }
}

impl NlpProblem for MleNlp<'_> {
    fn dimension(&self) -> usize {
        self.z0.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.z0.clone()
    }

    fn objective_value(&self, z: &[f64]) -> f64 {
        let (x, y) = self.split(z);
        let m = self.net.measurement(&x, &y);
        let fit: f64 = m.0.iter().zip(self.eta).zip(&self.weights).map(|((mi, ei), w)| w * (mi - ei).powi(2)).sum();
        let dy: Vec<f64> = y.as_slice().iter().zip(self.prior.mean.as_slice()).map(|(a, b)| a - b).collect();
        let pdy = self.prior.information.matvec(&dy);
        0.5 * fit + 0.5 * dy.iter().zip(&pdy).map(|(a, b)| a * b).sum::<f64>()
    }

    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let nx = self.net.n_state();
        let (x, y) = self.split(z);
        let m = self.net.measurement(&x, &y);
        let jac = self.net.jacobians(&x, &y);
        let wr: Vec<f64> = m.0.iter().zip(self.eta).zip(&self.weights).map(|((mi, ei), w)| w * (mi - ei)).collect();
        let fit: f64 = m.0.iter().zip(self.eta).zip(&wr).map(|((mi, ei), r)| r * (mi - ei)).sum();
        let dy: Vec<f64> = y.as_slice().iter().zip(self.prior.mean.as_slice()).map(|(a, b)| a - b).collect();
        let pdy = self.prior.information.matvec(&dy);
        let f = 0.5 * fit + 0.5 * dy.iter().zip(&pdy).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = jac.dm_dx.tr_matvec(&wr);
        let gy = jac.dm_dy.tr_matvec(&wr);
        grad.extend(gy.iter().zip(&pdy).map(|(a, b)| a + b));
        debug_assert_eq!(grad.len(), nx + y.len());
        (f, grad)
    }

    fn n_equalities(&self) -> usize {
        self.net.n_state()
    }

    fn equalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        let nx = self.net.n_state();
        let (x, y) = self.split(z);
        let s = self.net.residual_injection(&x, &y);
        let c = s.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let jac = self.net.jacobians(&x, &y);
        let mut j = Matrix::zeros(nx, z.len());
        j.set_block(0, 0, &jac.ds_dx);
        j.set_block(0, nx, &jac.ds_dy);
        (c, j)
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.lo.clone(), self.hi.clone()))
    }

    /// Gauss–Newton: `J_Mᵀ Σ⁻¹ J_M` plus the prior block.
    fn objective_hessian(&self, z: &[f64]) -> Option<Matrix<f64>> {
        let nx = self.net.n_state();
        let (x, y) = self.split(z);
        let jac = self.net.jacobians(&x, &y);
        let mut jm = Matrix::zeros(jac.dm_dx.rows(), z.len());
        jm.set_block(0, 0, &jac.dm_dx);
        jm.set_block(0, nx, &jac.dm_dy);
        let mut h = jm.weighted_gram(&self.weights);
        let np = y.len();
        for i in 0..np {
            for j in 0..np {
                h[(nx + i, nx + j)] += self.prior.information[(i, j)];
            }
        }
        Some(h)
    }
}

/// One Bayesian update from the measurement `η` taken at the applied input `û`.
///
/// Returns the estimated state and the posterior belief whose information is
/// `Σ₀⁻¹ + M_p(x*, ŷ⁺)ᵀ Σ⁻¹ M_p(x*, ŷ⁺)`.
pub fn mle_update(
    net: &Network,
    belief: &Belief,
    u_hat: &InputVector,
    eta: &MeasurementVector,
    noise: &NoiseModel,
    mode: SensitivityMode,
) -> Result<MleOutcome, EstimatorError> {
    let nx = net.n_state();
    let np = net.n_params();
    if eta.len() != net.n_measurements() || noise.variances.len() != net.n_measurements() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "{} measurements and {} noise channels for a network with {}",
            eta.len(),
            noise.variances.len(),
            net.n_measurements()
        )));
    }
    if belief.mean.len() != np || belief.information.shape() != (np, np) || u_hat.as_slice().len() != nx {
        return Err(EstimatorError::DimensionMismatch("belief or input does not match the network".into()));
    }
    let target: Vec<f64> = u_hat.as_slice().iter().zip(net.demand()).map(|(u, d)| u - d).collect();
    let x_start = match solve_power_flow(net, &belief.mean, u_hat, None) {
        Ok(pf) => pf.x,
        Err(_) => StateVector(eta.as_slice()[..nx].to_vec()),
    };
    let (mut lo, mut hi) = state_bounds(net, STATE_BOUND_RELAXATION);
    lo.extend(std::iter::repeat(f64::NEG_INFINITY).take(np));
    hi.extend(std::iter::repeat(f64::INFINITY).take(np));
    let mut z0: Vec<f64> = x_start.0.iter().zip(lo.iter().zip(&hi)).map(|(&v, (&l, &h))| v.clamp(l, h)).collect();
    z0.extend_from_slice(belief.mean.as_slice());

    let problem = MleNlp { net, prior: belief, target, eta: eta.as_slice(), weights: noise.weights(), z0, lo, hi };
    let options = NlpOptions { tol: ESTIMATOR_TOLERANCE, ..NlpOptions::default() };
    let sol = nlp::solve(&problem, &options)?;
    let nlp_accepted = sol.is_optimal() || (sol.constraint_violation <= 1e-6 && sol.kkt_residual <= 1e-4);
    let (x, y) = problem.split(&sol.z);
    let refined = refine(&problem, u_hat, x, y, nlp_accepted.then_some(sol.objective_value));
    let (x, y, objective) = match refined {
        Refined { x, y, objective, .. } if nlp_accepted => (x, y, objective),
        Refined { x, y, objective, stationary: true } => {
            log::debug!("estimation NLP stopped early (KKT {:.2e}); reduced Gauss-Newton converged", sol.kkt_residual);
            (x, y, objective)
        }
        _ => return Err(NlpError::MaxIterations { iterations: sol.iterations, kkt_residual: sol.kkt_residual }.into()),
    };
    let m_p = oed::sensitivity(net, &x, &y, mode)?;
    let information = oed::fisher(&belief.information, &m_p, noise)?.into_matrix();
    Ok(MleOutcome {
        x,
        belief: Belief { mean: y, information },
        objective,
        kkt_residual: sol.kkt_residual,
    })
}

const REFINE_STEPS: usize = 20;
/// Gauss–Newton decrement below which the reduced problem counts as stationary.
/// The objective is a negative log-likelihood, so this is the squared distance
/// to the optimum in posterior standard deviations.
const STATIONARY_DECREMENT: f64 = 1e-6;

struct Refined {
    x: StateVector,
    y: LineParams,
    objective: f64,
    stationary: bool,
}

/// Gauss–Newton on the parameters alone, with the state eliminated through
/// the power flow at the applied input. Shares its minimizers with the joint
/// problem and resolves weakly identifiable directions to full precision.
///
/// With `joint_objective` given, the starting point is kept only if the
/// power-flow projection does not increase the objective.
fn refine(
    problem: &MleNlp<'_>,
    u_hat: &InputVector,
    x: StateVector,
    y: LineParams,
    joint_objective: Option<f64>,
) -> Refined {
    let net = problem.net;
    let eval = |x_warm: &StateVector, y: &LineParams| -> Option<(StateVector, f64)> {
        let pf = solve_power_flow(net, y, u_hat, Some(x_warm)).ok()?;
        let mut z = pf.x.0.clone();
        z.extend_from_slice(y.as_slice());
        let f = problem.objective_value(&z);
        f.is_finite().then_some((pf.x, f))
    };
    let (mut x, mut objective) = match (eval(&x, &y), joint_objective) {
        (Some((xs, f)), Some(joint)) if f <= joint * (1.0 + 1e-12) + 1e-300 => (xs, f),
        (Some((xs, f)), None) => (xs, f),
        (_, Some(joint)) => return Refined { x, y, objective: joint, stationary: false },
        (None, None) => return Refined { x, y, objective: f64::INFINITY, stationary: false },
    };
    let mut y = y;
    let mut stationary = false;
    for _ in 0..REFINE_STEPS {
        let Ok(m_p) = oed::sensitivity(net, &x, &y, SensitivityMode::Total) else { break };
        let m = net.measurement(&x, &y);
        let wr: Vec<f64> = m.0.iter().zip(problem.eta).zip(&problem.weights).map(|((mi, ei), w)| w * (mi - ei)).collect();
        let dy: Vec<f64> = y.as_slice().iter().zip(problem.prior.mean.as_slice()).map(|(a, b)| a - b).collect();
        let grad: Vec<f64> =
            m_p.tr_matvec(&wr).iter().zip(problem.prior.information.matvec(&dy)).map(|(a, b)| a + b).collect();
        let mut gn = problem.prior.information.add(&m_p.weighted_gram(&problem.weights));
        gn.symmetrize();
        let Some(ch) = gn.cholesky() else { break };
        let step: Vec<f64> = ch.solve(&grad).iter().map(|s| -s).collect();
        let decrement = -step.iter().zip(&grad).map(|(s, g)| s * g).sum::<f64>();
        // Keep iterating below the threshold: noiseless problems converge
        // quadratically well past it.
        stationary = decrement <= STATIONARY_DECREMENT;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = LineParams::from_flat(y.as_slice().iter().zip(&step).map(|(a, s)| a + alpha * s).collect());
            if let Some((xt, ft)) = eval(&x, &trial) {
                if ft < objective {
                    let small = step.iter().zip(trial.as_slice()).all(|(s, t)| (alpha * s).abs() <= 1e-15 * t.abs().max(1.0));
                    x = xt;
                    y = trial;
                    objective = ft;
                    accepted = !small;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Refined { x, y, objective, stationary }
}
