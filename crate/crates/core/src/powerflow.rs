//! Newton power flow: solve `S(x, y) = u − d` for the state `x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{InputVector, LineParams, Network, StateVector};
use crate::linalg::norm_inf;

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITERATIONS: usize = 50;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("power-flow Jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("power flow did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfSolution {
    pub x: StateVector,
    /// `‖S(x, y) − (u − d)‖_∞` at `x`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn mismatch(net: &Network, x: &StateVector, y: &LineParams, target: &[f64]) -> Vec<f64> {
    net.residual_injection(x, y).iter().zip(target).map(|(s, t)| s - t).collect()
}

/// Full Newton with step halving. Cold start is the flat profile.
pub fn solve_power_flow(
    net: &Network,
    y: &LineParams,
    u: &InputVector,
    warm_start: Option<&StateVector>,
) -> Result<PfSolution, PfError> {
    let target: Vec<f64> = u.as_slice().iter().zip(net.demand()).map(|(ui, di)| ui - di).collect();
    let mut x = warm_start.cloned().unwrap_or_else(|| net.flat_state());
    let mut f = mismatch(net, &x, y, &target);
    let mut norm = norm_inf(&f);
    let mut iterations = 0;
    while norm > PF_TOLERANCE {
        if iterations == PF_MAX_ITERATIONS {
            return Err(PfError::NonConvergence { iterations, residual: norm });
        }
        let jac = net.jacobians(&x, y).ds_dx;
        let lu = jac.lu().ok_or(PfError::SingularJacobian { iteration: iterations })?;
        let step = lu.solve(&f);
        iterations += 1;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = StateVector(x.0.iter().zip(&step).map(|(xi, di)| xi - alpha * di).collect());
            let ft = mismatch(net, &trial, y, &target);
            let nt = norm_inf(&ft);
            if nt.is_finite() && nt < norm {
                accepted = Some((trial, ft, nt));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xt, ft, nt)) => {
                x = xt;
                f = ft;
                norm = nt;
            }
            None => return Err(PfError::NonConvergence { iterations, residual: norm }),
        }
    }
    Ok(PfSolution { x, residual_norm: norm, iterations, converged: true })
}
