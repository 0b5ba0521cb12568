//! Algebraic grid model: line flows, residual injections, the measurement
//! function and their analytic first derivatives.
//!
//! Layout conventions, fixed crate-wide:
//! - states `x = (v₂, θ₂, …, v_N, θ_N)` over non-slack buses in ascending order;
//! - inputs and injections `(p, q)` interleaved per non-slack bus, same order;
//! - parameters `y = (g_1 … g_L, b_1 … b_L)`, all conductances first;
//! - measurements `M = (x; P-flows of every line; Q-flows of every line)`.
//!
//! Every routine is generic over [`Scalar`] so the same code evaluates with
//! dual numbers for directional derivatives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::GridCase;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("no line between buses {0} and {1}")]
    UnknownLine(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Line conductances followed by line susceptances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineParams<T = f64>(Vec<T>);

impl<T: Scalar> LineParams<T> {
    pub fn new(conductance: &[T], susceptance: &[T]) -> Self {
        assert_eq!(conductance.len(), susceptance.len());
        let mut v = conductance.to_vec();
        v.extend_from_slice(susceptance);
        Self(v)
    }

    pub fn from_flat(values: Vec<T>) -> Self {
        assert!(values.len() % 2 == 0, "parameter vector must have even length");
        Self(values)
    }

    pub fn n_lines(&self) -> usize {
        self.0.len() / 2
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn conductances(&self) -> &[T] {
        &self.0[..self.n_lines()]
    }

    pub fn susceptances(&self) -> &[T] {
        &self.0[self.n_lines()..]
    }

    #[inline]
    pub fn g(&self, line: usize) -> T {
        self.0[line]
    }

    #[inline]
    pub fn b(&self, line: usize) -> T {
        self.0[self.n_lines() + line]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> LineParams<U> {
        LineParams(self.0.iter().map(|&v| f(v)).collect())
    }
}

/// Voltage magnitudes and angles at the non-slack buses, interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector<T = f64>(pub Vec<T>);

impl<T: Scalar> StateVector<T> {
    #[inline]
    pub fn v(&self, pos: usize) -> T {
        self.0[2 * pos]
    }

    #[inline]
    pub fn theta(&self, pos: usize) -> T {
        self.0[2 * pos + 1]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> StateVector<U> {
        StateVector(self.0.iter().map(|&v| f(v)).collect())
    }
}

/// Controllable `(p, q)` generation at the non-slack buses, interleaved.
/// Entries of buses without a generator are exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputVector(Vec<f64>);

impl InputVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn p(&self, pos: usize) -> f64 {
        self.0[2 * pos]
    }

    pub fn q(&self, pos: usize) -> f64 {
        self.0[2 * pos + 1]
    }
}

/// Measurement vector `(x; P-flows; Q-flows)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector<T = f64>(pub Vec<T>);

impl<T: Scalar> MeasurementVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Flow `k→l` and its partials with respect to `(v_k, θ_k, v_l, θ_l, g, b)`.
#[derive(Clone, Copy, Debug)]
pub struct FlowPartials<T> {
    pub p: T,
    pub q: T,
    pub dp: [T; 6],
    pub dq: [T; 6],
}

/// Directed flow over a line with series admittance `g + jb`:
/// `Π = v_k²(g, −b) − v_k v_l [[g, b], [−b, g]] (cos Δ, sin Δ)`, `Δ = θ_k − θ_l`.
#[inline]
pub fn directed_flow<T: Scalar>(vk: T, thk: T, vl: T, thl: T, g: T, b: T) -> (T, T) {
    let d = thk - thl;
    let (c, s) = (d.cos(), d.sin());
    let vkvl = vk * vl;
    let p = g * vk * vk - vkvl * (g * c + b * s);
    let q = -b * vk * vk - vkvl * (g * s - b * c);
    (p, q)
}

#[inline]
pub fn directed_flow_partials<T: Scalar>(vk: T, thk: T, vl: T, thl: T, g: T, b: T) -> FlowPartials<T> {
    let d = thk - thl;
    let (c, s) = (d.cos(), d.sin());
    let vkvl = vk * vl;
    let a = g * c + b * s;
    let bb = g * s - b * c;
    let two = T::from_f64(2.0);
    let p = g * vk * vk - vkvl * a;
    let q = -b * vk * vk - vkvl * bb;
    let dp = [two * g * vk - vl * a, vkvl * bb, -vk * a, -(vkvl * bb), vk * vk - vkvl * c, -(vkvl * s)];
    let dq = [-(two * b * vk) - vl * bb, -(vkvl * a), -(vk * bb), vkvl * a, -(vkvl * s), -(vk * vk) + vkvl * c];
    FlowPartials { p, q, dp, dq }
}

/// All first derivatives of the model at one point.
#[derive(Clone, Debug)]
pub struct Jacobians<T> {
    /// `∂S/∂x`, `nx × nx`.
    pub ds_dx: Matrix<T>,
    /// `∂S/∂y`, `nx × 2L`.
    pub ds_dy: Matrix<T>,
    /// `∂M/∂x`, `(nx + 2L) × nx`.
    pub dm_dx: Matrix<T>,
    /// `∂M/∂y`, `(nx + 2L) × 2L`.
    pub dm_dy: Matrix<T>,
    /// Slack injection `(p, q)` with respect to `x`, `2 × nx`.
    pub dslack_dx: Matrix<T>,
    /// Slack injection with respect to `y`, `2 × 2L`.
    pub dslack_dy: Matrix<T>,
}

/// Precomputed index structure of a validated [`GridCase`].
#[derive(Clone, Debug)]
pub struct Network {
    case: GridCase,
    slack: usize,
    /// Bus (0-based) → position among non-slack buses.
    state_pos: Vec<Option<usize>>,
    /// Position → bus (0-based).
    non_slack: Vec<usize>,
    /// Line endpoints (0-based).
    lines: Vec<(usize, usize)>,
    demand: Vec<f64>,
    slack_demand: (f64, f64),
}

impl Network {
    pub fn new(case: &GridCase) -> Self {
        let n = case.n_buses();
        let slack = case.slack_bus - 1;
        let non_slack: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
        let mut state_pos = vec![None; n];
        for (p, &bus) in non_slack.iter().enumerate() {
            state_pos[bus] = Some(p);
        }
        let lines = case.lines.iter().map(|l| (l.from - 1, l.to - 1)).collect();
        let mut demand = Vec::with_capacity(2 * non_slack.len());
        for &bus in &non_slack {
            demand.push(case.buses[bus].p_demand);
            demand.push(case.buses[bus].q_demand);
        }
        let sb = &case.buses[slack];
        Self {
            case: case.clone(),
            slack,
            state_pos,
            non_slack,
            lines,
            demand,
            slack_demand: (sb.p_demand, sb.q_demand),
        }
    }

    pub fn case(&self) -> &GridCase {
        &self.case
    }

    pub fn n_buses(&self) -> usize {
        self.case.n_buses()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Length of the state, input and injection vectors.
    pub fn n_state(&self) -> usize {
        2 * self.non_slack.len()
    }

    pub fn n_params(&self) -> usize {
        2 * self.lines.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.n_state() + 2 * self.n_lines()
    }

    /// 1-based bus numbers of the non-slack buses in state order.
    pub fn non_slack_buses(&self) -> Vec<usize> {
        self.non_slack.iter().map(|b| b + 1).collect()
    }

    /// State position of a 1-based bus number.
    pub fn state_position(&self, bus: usize) -> Option<usize> {
        self.state_pos.get(bus.wrapping_sub(1)).copied().flatten()
    }

    pub fn slack_bus(&self) -> usize {
        self.slack + 1
    }

    pub fn line_endpoints(&self) -> Vec<(usize, usize)> {
        self.lines.iter().map(|&(k, l)| (k + 1, l + 1)).collect()
    }

    /// Demand vector `d`, interleaved like the inputs.
    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn slack_demand(&self) -> (f64, f64) {
        self.slack_demand
    }

    /// Flat start: slack voltage magnitude everywhere, zero angles.
    pub fn flat_state(&self) -> StateVector {
        let mut x = Vec::with_capacity(self.n_state());
        for _ in &self.non_slack {
            x.push(self.case.slack_voltage);
            x.push(0.0);
        }
        StateVector(x)
    }

    /// Builds an input vector, rejecting nonzero entries at buses without a generator.
    pub fn input(&self, values: Vec<f64>) -> Result<InputVector, GridError> {
        if values.len() != self.n_state() {
            return Err(GridError::DimensionMismatch(format!(
                "input has {} entries, expected {}",
                values.len(),
                self.n_state()
            )));
        }
        for (p, &bus) in self.non_slack.iter().enumerate() {
            if self.case.generator_at(bus + 1).is_none() && (values[2 * p] != 0.0 || values[2 * p + 1] != 0.0) {
                return Err(GridError::DimensionMismatch(format!("nonzero input at bus {} without generator", bus + 1)));
            }
        }
        Ok(InputVector(values))
    }

    /// Like [`Network::input`] but zeroes the entries of non-generator buses.
    pub fn input_projected(&self, mut values: Vec<f64>) -> InputVector {
        assert_eq!(values.len(), self.n_state());
        for (p, &bus) in self.non_slack.iter().enumerate() {
            if self.case.generator_at(bus + 1).is_none() {
                values[2 * p] = 0.0;
                values[2 * p + 1] = 0.0;
            }
        }
        InputVector(values)
    }

    /// `(v, θ)` of a 0-based bus, slack values included.
    #[inline]
    fn voltage<T: Scalar>(&self, x: &StateVector<T>, bus: usize) -> (T, T) {
        match self.state_pos[bus] {
            Some(p) => (x.v(p), x.theta(p)),
            None => (T::from_f64(self.case.slack_voltage), T::zero()),
        }
    }

    fn check_dims<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) {
        assert_eq!(x.len(), self.n_state(), "state vector length");
        assert_eq!(y.len(), self.n_params(), "parameter vector length");
    }

    /// Flow `(p, q)` leaving bus `from` over the line joining it to `to` (1-based).
    pub fn line_flow<T: Scalar>(
        &self,
        x: &StateVector<T>,
        y: &LineParams<T>,
        (from, to): (usize, usize),
    ) -> Result<(T, T), GridError> {
        self.check_dims(x, y);
        let (k, l) = (from.wrapping_sub(1), to.wrapping_sub(1));
        let idx = self
            .lines
            .iter()
            .position(|&(a, b)| (a, b) == (k, l) || (a, b) == (l, k))
            .ok_or(GridError::UnknownLine(from, to))?;
        let (vk, tk) = self.voltage(x, k);
        let (vl, tl) = self.voltage(x, l);
        Ok(directed_flow(vk, tk, vl, tl, y.g(idx), y.b(idx)))
    }

    /// Net injections `S_k = Σ_l Π_{k,l}` at every bus (0-based order).
    fn all_injections<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) -> Vec<(T, T)> {
        let mut s = vec![(T::zero(), T::zero()); self.n_buses()];
        for (i, &(k, l)) in self.lines.iter().enumerate() {
            let (vk, tk) = self.voltage(x, k);
            let (vl, tl) = self.voltage(x, l);
            let (g, b) = (y.g(i), y.b(i));
            let (pf, qf) = directed_flow(vk, tk, vl, tl, g, b);
            let (pr, qr) = directed_flow(vl, tl, vk, tk, g, b);
            s[k].0 += pf;
            s[k].1 += qf;
            s[l].0 += pr;
            s[l].1 += qr;
        }
        s
    }

    /// Residual injections `S(x, y)` at the non-slack buses, interleaved.
    pub fn residual_injection<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) -> Vec<T> {
        self.check_dims(x, y);
        let s = self.all_injections(x, y);
        self.non_slack.iter().flat_map(|&bus| [s[bus].0, s[bus].1]).collect()
    }

    /// Net injection `(p, q)` at the slack bus.
    pub fn slack_injection<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) -> (T, T) {
        self.check_dims(x, y);
        self.all_injections(x, y)[self.slack]
    }

    /// `M(x, y) = (x; P-flows; Q-flows)`.
    pub fn measurement<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) -> MeasurementVector<T> {
        self.check_dims(x, y);
        let nl = self.n_lines();
        let mut m = Vec::with_capacity(self.n_measurements());
        m.extend_from_slice(x.as_slice());
        let mut q = Vec::with_capacity(nl);
        for (i, &(k, l)) in self.lines.iter().enumerate() {
            let (vk, tk) = self.voltage(x, k);
            let (vl, tl) = self.voltage(x, l);
            let (pf, qf) = directed_flow(vk, tk, vl, tl, y.g(i), y.b(i));
            m.push(pf);
            q.push(qf);
        }
        m.extend(q);
        MeasurementVector(m)
    }

    /// Analytic Jacobians of `S`, `M` and the slack injection.
    pub fn jacobians<T: Scalar>(&self, x: &StateVector<T>, y: &LineParams<T>) -> Jacobians<T> {
        self.check_dims(x, y);
        let nx = self.n_state();
        let nl = self.n_lines();
        let np = 2 * nl;
        let mut ds_dx = Matrix::zeros(nx, nx);
        let mut ds_dy = Matrix::zeros(nx, np);
        let mut dm_dx = Matrix::zeros(nx + np, nx);
        let mut dm_dy = Matrix::zeros(nx + np, np);
        let mut dslack_dx = Matrix::zeros(2, nx);
        let mut dslack_dy = Matrix::zeros(2, np);
        for i in 0..nx {
            dm_dx[(i, i)] = T::one();
        }

        // Row offset of bus `bus` in S (None for the slack).
        let inj_row = |bus: usize| self.state_pos[bus].map(|p| 2 * p);

        for (i, &(k, l)) in self.lines.iter().enumerate() {
            let (vk, tk) = self.voltage(x, k);
            let (vl, tl) = self.voltage(x, l);
            let (g, b) = (y.g(i), y.b(i));
            let fwd = directed_flow_partials(vk, tk, vl, tl, g, b);
            let rev = directed_flow_partials(vl, tl, vk, tk, g, b);
            let (gcol, bcol) = (i, nl + i);
            // State columns of (v_k, θ_k) and (v_l, θ_l) in the forward orientation.
            let kcols = self.state_pos[k].map(|p| (2 * p, 2 * p + 1));
            let lcols = self.state_pos[l].map(|p| (2 * p, 2 * p + 1));

            // Measurement rows use the forward orientation only.
            let (mp, mq) = (nx + i, nx + nl + i);
            for (row, d) in [(mp, &fwd.dp), (mq, &fwd.dq)] {
                if let Some((cv, ct)) = kcols {
                    dm_dx[(row, cv)] += d[0];
                    dm_dx[(row, ct)] += d[1];
                }
                if let Some((cv, ct)) = lcols {
                    dm_dx[(row, cv)] += d[2];
                    dm_dx[(row, ct)] += d[3];
                }
                dm_dy[(row, gcol)] += d[4];
                dm_dy[(row, bcol)] += d[5];
            }

            // Injection rows: forward flow lands on bus k, reverse on bus l.
            // For the reverse partials the "own" bus is l.
            for (own, fp, own_cols, other_cols) in [(k, &fwd, kcols, lcols), (l, &rev, lcols, kcols)] {
                let pairs = [(0usize, &fp.dp), (1usize, &fp.dq)];
                match inj_row(own) {
                    Some(r0) => {
                        for (off, d) in pairs {
                            let r = r0 + off;
                            if let Some((cv, ct)) = own_cols {
                                ds_dx[(r, cv)] += d[0];
                                ds_dx[(r, ct)] += d[1];
                            }
                            if let Some((cv, ct)) = other_cols {
                                ds_dx[(r, cv)] += d[2];
                                ds_dx[(r, ct)] += d[3];
                            }
                            ds_dy[(r, gcol)] += d[4];
                            ds_dy[(r, bcol)] += d[5];
                        }
                    }
                    None => {
                        for (off, d) in pairs {
                            if let Some((cv, ct)) = other_cols {
                                dslack_dx[(off, cv)] += d[2];
                                dslack_dx[(off, ct)] += d[3];
                            }
                            dslack_dy[(off, gcol)] += d[4];
                            dslack_dy[(off, bcol)] += d[5];
                        }
                    }
                }
            }
        }
        Jacobians { ds_dx, ds_dy, dm_dx, dm_dy, dslack_dx, dslack_dy }
    }
}
