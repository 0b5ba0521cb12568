//! Parameter sensitivities, Fisher information and the three set-point
//! decision problems: economic dispatch, pure experiment design, and the
//! combined cost-plus-variance problem.
//!
//! The decision problems are posed over the state `x` alone: the power-flow
//! equations `S(x, ŷ) = u − d` are solved for `u`, so generator limits become
//! inequalities on `S(x, ŷ) + d`, and buses without a generator contribute the
//! equalities `S_k(x, ŷ) + d_k = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::Belief;
use crate::grid::{InputVector, LineParams, Network, StateVector};
use crate::linalg::{Cholesky, Matrix};
use crate::nlp::{self, NlpError, NlpOptions, NlpProblem, NlpStatus};
use crate::scalar::{Dual, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OedError {
    #[error("power-flow Jacobian ∂S/∂x is singular")]
    SingularJacobian,
    #[error("Fisher information is not positive definite")]
    NotPositiveDefinite,
    #[error("decision problem infeasible: {0}")]
    Infeasible(String),
    #[error("invalid decision problem: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

/// Which derivative of the measurements with respect to the parameters is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Total derivative `∂M/∂y − ∂M/∂x (∂S/∂x)⁻¹ ∂S/∂y`.
    #[default]
    Total,
    /// Implicit part only, `−∂M/∂x (∂S/∂x)⁻¹ ∂S/∂y`.
    PaperStrict,
}

/// Diagonal measurement-noise covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variances: Vec<f64>,
}

impl NoiseModel {
    pub fn isotropic(variance: f64, channels: usize) -> Self {
        Self { variances: vec![variance; channels] }
    }

    /// Inverse variances.
    pub fn weights(&self) -> Vec<f64> {
        self.variances.iter().map(|v| 1.0 / v).collect()
    }
}

/// Sensitivity `M_p = dM/dy` of the measurements at a power-flow solution,
/// `(n_state + 2L) × 2L`.
pub fn sensitivity<T: Scalar>(
    net: &Network,
    x: &StateVector<T>,
    y_hat: &LineParams<T>,
    mode: SensitivityMode,
) -> Result<Matrix<T>, OedError> {
    let jac = net.jacobians(x, y_hat);
    let lu = jac.ds_dx.lu().ok_or(OedError::SingularJacobian)?;
    // X = (∂S/∂x)⁻¹ ∂S/∂y = −dx/dy
    let dxdy = lu.solve_matrix(&jac.ds_dy);
    let nx = net.n_state();
    let np = net.n_params();
    let mut mp = Matrix::zeros(nx + np, np);
    for i in 0..nx {
        for j in 0..np {
            mp[(i, j)] = -dxdy[(i, j)];
        }
    }
    for r in 0..np {
        let row = nx + r;
        for j in 0..np {
            let mut v = -jac.dm_dx.row(row).iter().zip(0..nx).fold(T::zero(), |acc, (&a, i)| acc + a * dxdy[(i, j)]);
            if mode == SensitivityMode::Total {
                v += jac.dm_dy[(row, j)];
            }
            mp[(row, j)] = v;
        }
    }
    Ok(mp)
}

/// `F = Σ₀⁻¹ + M_pᵀ Σ⁻¹ M_p` with its cached trace of inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    matrix: Matrix<f64>,
    trace_of_inverse: Option<f64>,
}

impl FisherMatrix {
    pub fn matrix(&self) -> &Matrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<f64> {
        self.matrix
    }

    /// `Tr(F⁻¹)`, the A-optimality criterion.
    pub fn trace_of_inverse(&self) -> Result<f64, OedError> {
        self.trace_of_inverse.ok_or(OedError::NotPositiveDefinite)
    }
}

pub fn fisher(information: &Matrix<f64>, m_p: &Matrix<f64>, noise: &NoiseModel) -> Result<FisherMatrix, OedError> {
    if m_p.rows() != noise.variances.len() || m_p.cols() != information.rows() || !information.shape().eq(&(m_p.cols(), m_p.cols())) {
        return Err(OedError::InvalidSpec(format!(
            "sensitivity {:?}, prior {:?}, noise {} channels",
            m_p.shape(),
            information.shape(),
            noise.variances.len()
        )));
    }
    let mut matrix = information.add(&m_p.weighted_gram(&noise.weights()));
    matrix.symmetrize();
    let trace_of_inverse = matrix.cholesky().map(|c| c.trace_of_inverse());
    Ok(FisherMatrix { matrix, trace_of_inverse })
}

/// `Tr(A⁻¹)` of a symmetric positive-definite matrix.
pub fn trace_of_inverse(a: &Matrix<f64>) -> Result<f64, OedError> {
    a.cholesky().map(|c| c.trace_of_inverse()).ok_or(OedError::NotPositiveDefinite)
}

/// Prior information with `ε·I` added, `ε = 10⁻¹²·max(1, max|Σ₀⁻¹|)`.
pub fn regularized_information(information: &Matrix<f64>) -> Matrix<f64> {
    let eps = 1e-12 * information.max_abs().max(1.0);
    let mut m = information.clone();
    for i in 0..m.rows() {
        m[(i, i)] += eps;
    }
    m
}

/// Predicted variance `Tr(V(x)) = Tr((Σ₀⁻¹ + M_p(x)ᵀ Σ⁻¹ M_p(x))⁻¹)` as a function of the state.
#[derive(Clone, Debug)]
pub struct PredictedVariance<'a> {
    net: &'a Network,
    y_hat: &'a LineParams,
    information: Matrix<f64>,
    weights: Vec<f64>,
    mode: SensitivityMode,
}

impl<'a> PredictedVariance<'a> {
    pub fn new(
        net: &'a Network,
        y_hat: &'a LineParams,
        information: &Matrix<f64>,
        noise: &NoiseModel,
        mode: SensitivityMode,
    ) -> Self {
        Self { net, y_hat, information: regularized_information(information), weights: noise.weights(), mode }
    }

    fn factor(&self, x: &StateVector) -> Result<(Matrix<f64>, Cholesky<f64>), OedError> {
        let mp = sensitivity(self.net, x, self.y_hat, self.mode)?;
        let mut f = self.information.add(&mp.weighted_gram(&self.weights));
        f.symmetrize();
        let ch = f.cholesky().ok_or(OedError::NotPositiveDefinite)?;
        Ok((mp, ch))
    }

    pub fn trace(&self, x: &StateVector) -> Result<f64, OedError> {
        self.factor(x).map(|(_, ch)| ch.trace_of_inverse())
    }

    /// Value and gradient in `x`, using `dTr(F⁻¹) = −Tr(F⁻¹ dF F⁻¹)` with
    /// `dM_p` from a dual-number pass per state coordinate.
    pub fn trace_and_gradient(&self, x: &StateVector) -> Result<(f64, Vec<f64>), OedError> {
        let (mp, ch) = self.factor(x)?;
        let v = ch.inverse();
        let trace = v.trace();
        // dTr = −2 ⟨W M_p V², dM_p⟩
        let v2 = v.matmul(&v);
        let mut g = mp.matmul(&v2);
        for i in 0..g.rows() {
            let w = self.weights[i];
            for j in 0..g.cols() {
                g[(i, j)] *= w;
            }
        }
        let y_dual = self.y_hat.map(Dual::constant);
        let n = x.len();
        let mut grad = vec![0.0; n];
        for (k, gk) in grad.iter_mut().enumerate() {
            let xd = StateVector(
                x.0.iter().enumerate().map(|(i, &xi)| if i == k { Dual::variable(xi) } else { Dual::constant(xi) }).collect(),
            );
            let dmp = sensitivity(self.net, &xd, &y_dual, self.mode)?;
            let inner: f64 = g.as_slice().iter().zip(dmp.as_slice()).map(|(a, d)| a * d.eps).sum();
            *gk = -2.0 * inner;
        }
        Ok((trace, grad))
    }
}

/// Generation cost `Σ α_i P_i² + β_i P_i` with `P_i` in MW, slack generator included.
pub fn generation_cost(net: &Network, u: &InputVector, slack_p: f64) -> f64 {
    let case = net.case();
    case.generators
        .iter()
        .map(|g| {
            let p_pu = if g.bus == case.slack_bus {
                slack_p
            } else {
                u.p(net.state_position(g.bus).expect("generator bus is not the slack"))
            };
            let mw = p_pu * case.base_power;
            g.cost_quadratic * mw * mw + g.cost_linear * mw
        })
        .sum()
}

/// Active generation of the slack generator implied by a state.
pub fn slack_generation(net: &Network, x: &StateVector, y: &LineParams) -> (f64, f64) {
    let (p, q) = net.slack_injection(x, y);
    let (pd, qd) = net.slack_demand();
    (p + pd, q + qd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    /// Minimize generation cost.
    Opf,
    /// Minimize `Tr(V) + c·‖p − p⁻‖²`.
    Oed { input_change_weight: f64 },
    /// Minimize `C(u) + Tr(V)/ρ`.
    OedOpf { rho: f64 },
}

#[derive(Clone, Debug)]
pub struct DecisionProblemSpec<'a> {
    pub kind: DecisionKind,
    pub belief: &'a Belief,
    pub noise: &'a NoiseModel,
    /// Previously applied input `p⁻`; required for [`DecisionKind::Oed`].
    pub previous_input: Option<&'a InputVector>,
    pub warm_start: Option<&'a StateVector>,
    pub sensitivity: SensitivityMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub x: StateVector,
    pub u: InputVector,
    /// Slack generation `(p, q)` [p.u.].
    pub slack: (f64, f64),
    /// Generation cost `C(u*)` [$].
    pub cost: f64,
    /// Predicted `Tr(V)` at the decision [S²].
    pub trace_v: f64,
    pub objective: f64,
    pub status: NlpStatus,
    pub kkt_residual: f64,
}

/// Feasibility level at which a non-optimal NLP result is still accepted.
const ACCEPTABLE_VIOLATION: f64 = 1e-5;

struct DecisionNlp<'a> {
    net: &'a Network,
    y_hat: &'a LineParams,
    cost_weight: f64,
    trace_weight: f64,
    change_weight: f64,
    p_prev: Vec<f64>,
    variance: Option<PredictedVariance<'a>>,
    /// State positions whose injections must vanish.
    passive: Vec<usize>,
    /// (position or None for slack, gen index).
    gens: Vec<(Option<usize>, usize)>,
    x0: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> DecisionNlp<'a> {
    fn generation(&self, s: &[f64], slack: (f64, f64), pos: Option<usize>) -> (f64, f64) {
        let d = self.net.demand();
        match pos {
            Some(p) => (s[2 * p] + d[2 * p], s[2 * p + 1] + d[2 * p + 1]),
            None => {
                let (pd, qd) = self.net.slack_demand();
                (slack.0 + pd, slack.1 + qd)
            }
        }
    }

    fn economic(&self, x: &StateVector) -> f64 {
        let s = self.net.residual_injection(x, self.y_hat);
        let slack = self.net.slack_injection(x, self.y_hat);
        let case = self.net.case();
        let mut cost = 0.0;
        let mut change = 0.0;
        for &(pos, gi) in &self.gens {
            let g = &case.generators[gi];
            let (p, _) = self.generation(&s, slack, pos);
            let mw = p * case.base_power;
            cost += g.cost_quadratic * mw * mw + g.cost_linear * mw;
            if let Some(pp) = pos {
                let dp = p - self.p_prev[pp];
                change += dp * dp;
            }
        }
        self.cost_weight * cost + self.change_weight * change
    }
}

impl NlpProblem for DecisionNlp<'_> {
    fn dimension(&self) -> usize {
        self.x0.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn objective_value(&self, z: &[f64]) -> f64 {
        let x = StateVector(z.to_vec());
        let mut f = self.economic(&x);
        if let Some(pv) = &self.variance {
            f += self.trace_weight * pv.trace(&x).unwrap_or(f64::NAN);
        }
        f
    }

    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let x = StateVector(z.to_vec());
        let n = z.len();
        let s = self.net.residual_injection(&x, self.y_hat);
        let slack = self.net.slack_injection(&x, self.y_hat);
        let jac = self.net.jacobians(&x, self.y_hat);
        let case = self.net.case();
        let mut f = 0.0;
        let mut grad = vec![0.0; n];
        for &(pos, gi) in &self.gens {
            let g = &case.generators[gi];
            let (p, _) = self.generation(&s, slack, pos);
            let base = case.base_power;
            let mw = p * base;
            f += self.cost_weight * (g.cost_quadratic * mw * mw + g.cost_linear * mw);
            let mut dfdp = self.cost_weight * (2.0 * g.cost_quadratic * mw + g.cost_linear) * base;
            if let Some(pp) = pos {
                let dp = p - self.p_prev[pp];
                f += self.change_weight * dp * dp;
                dfdp += self.change_weight * 2.0 * dp;
            }
            let row = match pos {
                Some(pp) => jac.ds_dx.row(2 * pp),
                None => jac.dslack_dx.row(0),
            };
            for (gr, &r) in grad.iter_mut().zip(row) {
                *gr += dfdp * r;
            }
        }
        if let Some(pv) = &self.variance {
            match pv.trace_and_gradient(&x) {
                Ok((t, gt)) => {
                    f += self.trace_weight * t;
                    for (gr, v) in grad.iter_mut().zip(gt) {
                        *gr += self.trace_weight * v;
                    }
                }
                Err(_) => return (f64::NAN, vec![f64::NAN; n]),
            }
        }
        (f, grad)
    }

    fn n_equalities(&self) -> usize {
        2 * self.passive.len()
    }

    fn equalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        let x = StateVector(z.to_vec());
        let s = self.net.residual_injection(&x, self.y_hat);
        let jac = self.net.jacobians(&x, self.y_hat);
        let d = self.net.demand();
        let mut c = Vec::with_capacity(self.n_equalities());
        let mut j = Matrix::zeros(self.n_equalities(), z.len());
        for (r, &p) in self.passive.iter().enumerate() {
            for off in 0..2 {
                c.push(s[2 * p + off] + d[2 * p + off]);
                for (col, &v) in jac.ds_dx.row(2 * p + off).iter().enumerate() {
                    j[(2 * r + off, col)] = v;
                }
            }
        }
        (c, j)
    }

    fn n_inequalities(&self) -> usize {
        4 * self.gens.len()
    }

    fn inequalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        let x = StateVector(z.to_vec());
        let s = self.net.residual_injection(&x, self.y_hat);
        let slack = self.net.slack_injection(&x, self.y_hat);
        let jac = self.net.jacobians(&x, self.y_hat);
        let case = self.net.case();
        let mut h = Vec::with_capacity(self.n_inequalities());
        let mut jh = Matrix::zeros(self.n_inequalities(), z.len());
        for (k, &(pos, gi)) in self.gens.iter().enumerate() {
            let g = &case.generators[gi];
            let (p, q) = self.generation(&s, slack, pos);
            let (prow, qrow) = match pos {
                Some(pp) => (jac.ds_dx.row(2 * pp), jac.ds_dx.row(2 * pp + 1)),
                None => (jac.dslack_dx.row(0), jac.dslack_dx.row(1)),
            };
            let rows = [(p - g.p_max, prow, 1.0), (g.p_min - p, prow, -1.0), (q - g.q_max, qrow, 1.0), (g.q_min - q, qrow, -1.0)];
            for (off, (val, grad, sign)) in rows.into_iter().enumerate() {
                h.push(val);
                for (col, &v) in grad.iter().enumerate() {
                    jh[(4 * k + off, col)] = sign * v;
                }
            }
        }
        (h, jh)
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.lo.clone(), self.hi.clone()))
    }
}

/// State bounds `(lo, hi)` from bus voltage limits and the angle limit,
/// widened by `relax` (0 = nominal, 0.5 = ±50%).
pub fn state_bounds(net: &Network, relax: f64) -> (Vec<f64>, Vec<f64>) {
    let case = net.case();
    let ang = (case.angle_limit * (1.0 + relax)).min(std::f64::consts::PI - 1e-3);
    let mut lo = Vec::with_capacity(net.n_state());
    let mut hi = Vec::with_capacity(net.n_state());
    for bus in net.non_slack_buses() {
        let b = &case.buses[bus - 1];
        lo.push(b.v_min * (1.0 - relax));
        hi.push(b.v_max * (1.0 + relax));
        lo.push(-ang);
        hi.push(ang);
    }
    (lo, hi)
}

/// Solves the chosen decision problem from `spec.warm_start` (flat start if absent).
pub fn solve_decision(net: &Network, spec: &DecisionProblemSpec<'_>) -> Result<DecisionOutcome, OedError> {
    let case = net.case();
    let y_hat = &spec.belief.mean;
    let (cost_weight, trace_weight, change_weight) = match spec.kind {
        DecisionKind::Opf => (1.0, 0.0, 0.0),
        DecisionKind::Oed { input_change_weight } => {
            if !(input_change_weight >= 0.0) {
                return Err(OedError::InvalidSpec("input-change weight must be non-negative".into()));
            }
            (0.0, 1.0, input_change_weight)
        }
        DecisionKind::OedOpf { rho } => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(OedError::InvalidSpec(format!("rho must be positive, got {rho}")));
            }
            (1.0, 1.0 / rho, 0.0)
        }
    };
    let p_prev: Vec<f64> = match (spec.kind, spec.previous_input) {
        (DecisionKind::Oed { .. }, None) => {
            return Err(OedError::InvalidSpec("pure design problem needs the previous input".into()))
        }
        (_, Some(u)) => (0..net.n_state() / 2).map(|p| u.p(p)).collect(),
        (_, None) => vec![0.0; net.n_state() / 2],
    };
    let p_cap: f64 = case.generators.iter().map(|g| g.p_max).sum();
    let p_dem: f64 = case.buses.iter().map(|b| b.p_demand).sum();
    if p_cap < p_dem {
        return Err(OedError::Infeasible(format!("generation capacity {p_cap} p.u. below demand {p_dem} p.u.")));
    }

    let mut passive = Vec::new();
    let mut gens = Vec::new();
    for (p, bus) in net.non_slack_buses().into_iter().enumerate() {
        if case.generator_at(bus).is_none() {
            passive.push(p);
        }
    }
    for (gi, g) in case.generators.iter().enumerate() {
        gens.push((net.state_position(g.bus), gi));
    }
    let (lo, hi) = state_bounds(net, 0.0);
    let start = spec.warm_start.cloned().unwrap_or_else(|| net.flat_state());
    let x0: Vec<f64> = start.0.iter().zip(lo.iter().zip(&hi)).map(|(&v, (&l, &h))| v.clamp(l, h)).collect();
    let variance = (trace_weight > 0.0)
        .then(|| PredictedVariance::new(net, y_hat, &spec.belief.information, spec.noise, spec.sensitivity));
    let problem = DecisionNlp {
        net,
        y_hat,
        cost_weight,
        trace_weight,
        change_weight,
        p_prev,
        variance,
        passive,
        gens,
        x0,
        lo,
        hi,
    };
    let sol = nlp::solve(&problem, &NlpOptions::default())?;
    if sol.status != NlpStatus::Optimal {
        if sol.constraint_violation > ACCEPTABLE_VIOLATION {
            return Err(NlpError::MaxIterations { iterations: sol.iterations, kkt_residual: sol.kkt_residual }.into());
        }
        log::debug!("decision problem stopped at KKT residual {:.2e}; accepting feasible point", sol.kkt_residual);
    }
    let x = StateVector(sol.z.clone());
    let s = net.residual_injection(&x, y_hat);
    let u = net.input_projected(s.iter().zip(net.demand()).map(|(si, di)| si + di).collect());
    let slack = slack_generation(net, &x, y_hat);
    let cost = generation_cost(net, &u, slack.0);
    let trace_v = PredictedVariance::new(net, y_hat, &spec.belief.information, spec.noise, spec.sensitivity).trace(&x)?;
    Ok(DecisionOutcome {
        x,
        u,
        slack,
        cost,
        trace_v,
        objective: sol.objective_value,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
    })
}
