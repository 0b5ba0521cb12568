//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use oedopf::case_io::{case5, BusSpec, GenSpec, LineSpec};
use oedopf::grid::Jacobians;
use oedopf::linalg::Matrix;
use oedopf::{GridCase, InputVector, LineParams, Network, SensitivityMode, StateVector};
use rand::Rng;

pub fn two_bus(g: f64, b: f64) -> GridCase {
    let bus = |index, p, q| BusSpec { index, p_demand: p, q_demand: q, v_min: 0.9, v_max: 1.1 };
    GridCase {
        base_power: 100.0,
        slack_bus: 1,
        slack_voltage: 1.0,
        angle_limit: 1.0,
        buses: vec![bus(1, 0.0, 0.0), bus(2, 0.5, 0.1)],
        lines: vec![LineSpec { from: 1, to: 2, conductance: g, susceptance: b }],
        generators: vec![
            GenSpec { bus: 1, p_min: 0.0, p_max: 2.0, q_min: -1.0, q_max: 1.0, cost_quadratic: 0.1, cost_linear: 15.0 },
            GenSpec { bus: 2, p_min: 0.0, p_max: 1.0, q_min: -1.0, q_max: 1.0, cost_quadratic: 0.2, cost_linear: 20.0 },
        ],
    }
}

pub fn case5_network() -> (GridCase, Network) {
    let case = case5();
    let net = Network::new(&case);
    (case, net)
}

/// State near the operating region: `v ∈ [0.9, 1.1]`, `θ ∈ [−0.3, 0.3]`.
pub fn random_state(rng: &mut impl Rng, net: &Network) -> StateVector {
    let mut x = Vec::with_capacity(net.n_state());
    for _ in 0..net.n_state() / 2 {
        x.push(rng.random_range(0.9..1.1));
        x.push(rng.random_range(-0.3..0.3));
    }
    StateVector(x)
}

/// Nominal parameters scaled entrywise by a factor in `[0.7, 1.3]`.
pub fn random_params(rng: &mut impl Rng, nominal: &LineParams) -> LineParams {
    LineParams::from_flat(nominal.as_slice().iter().map(|v| v * rng.random_range(0.7..1.3)).collect())
}

/// Generator set-points drawn inside the generator limits, zero elsewhere.
pub fn random_input(rng: &mut impl Rng, net: &Network) -> InputVector {
    let case = net.case();
    let mut values = vec![0.0; net.n_state()];
    for (pos, bus) in net.non_slack_buses().into_iter().enumerate() {
        if let Some(gen) = case.generator_at(bus) {
            values[2 * pos] = rng.random_range(gen.p_min..=gen.p_max);
            values[2 * pos + 1] = rng.random_range(gen.q_min.max(-1.0)..=gen.q_max.min(1.0)) * 0.5;
        }
    }
    net.input(values).expect("generator buses only")
}

/// Entrywise `|a − e| ≤ tol · max(|e|, 1)`; returns the worst ratio to the allowance.
pub fn worst_mismatch(actual: &[f64], expected: &[f64], tol: f64) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual.iter().zip(expected).map(|(a, e)| (a - e).abs() / (tol * e.abs().max(1.0))).fold(0.0, f64::max)
}

/// Central difference of a vector function, one column per coordinate.
pub fn central_difference(z: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Matrix<f64> {
    let m = f(z).len();
    let mut jac = Matrix::zeros(m, z.len());
    for j in 0..z.len() {
        let h = 1e-6 * z[j].abs().max(1.0);
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += h;
        zm[j] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Finite-difference versions of every block in [`Jacobians`].
pub fn fd_jacobians(net: &Network, x: &StateVector, y: &LineParams) -> Jacobians<f64> {
    let yv = y.as_slice().to_vec();
    let xv = x.as_slice().to_vec();
    let at = |xs: &[f64], ys: &[f64]| (StateVector(xs.to_vec()), LineParams::from_flat(ys.to_vec()));
    let ds_dx = central_difference(&xv, |z| {
        let (x, y) = at(z, &yv);
        net.residual_injection(&x, &y)
    });
    let ds_dy = central_difference(&yv, |z| {
        let (x, y) = at(&xv, z);
        net.residual_injection(&x, &y)
    });
    let dm_dx = central_difference(&xv, |z| {
        let (x, y) = at(z, &yv);
        net.measurement(&x, &y).0
    });
    let dm_dy = central_difference(&yv, |z| {
        let (x, y) = at(&xv, z);
        net.measurement(&x, &y).0
    });
    let slack = |x: &StateVector, y: &LineParams| {
        let (p, q) = net.slack_injection(x, y);
        vec![p, q]
    };
    let dslack_dx = central_difference(&xv, |z| {
        let (x, y) = at(z, &yv);
        slack(&x, &y)
    });
    let dslack_dy = central_difference(&yv, |z| {
        let (x, y) = at(&xv, z);
        slack(&x, &y)
    });
    Jacobians { ds_dx, ds_dy, dm_dx, dm_dy, dslack_dx, dslack_dy }
}

/// Newton on `S(x, y) = u − d` to machine precision, independent of the library solver.
pub fn exact_power_flow(net: &Network, y: &LineParams, u: &InputVector, start: &StateVector) -> Option<StateVector> {
    let target: Vec<f64> = u.as_slice().iter().zip(net.demand()).map(|(a, d)| a - d).collect();
    let mut x = start.clone();
    for _ in 0..60 {
        let f: Vec<f64> = net.residual_injection(&x, y).iter().zip(&target).map(|(s, t)| s - t).collect();
        if f.iter().all(|v| v.abs() < 1e-14) {
            return Some(x);
        }
        let step = net.jacobians(&x, y).ds_dx.lu()?.solve(&f);
        x = StateVector(x.0.iter().zip(&step).map(|(a, s)| a - s).collect());
    }
    let f = net.residual_injection(&x, y);
    let worst = f.iter().zip(&target).map(|(s, t)| (s - t).abs()).fold(0.0, f64::max);
    (worst < 1e-12).then_some(x)
}

/// `dM(x_s(u, y), y)/dy` by re-solving the power flow at fixed input.
pub fn fd_sensitivity(net: &Network, x: &StateVector, y: &LineParams, mode: SensitivityMode) -> Option<Matrix<f64>> {
    let injection = net.residual_injection(x, y).iter().zip(net.demand()).map(|(s, d)| s + d).collect();
    let u = net.input_projected(injection);
    let np = y.len();
    let m = net.n_measurements();
    let mut out = Matrix::zeros(m, np);
    for j in 0..np {
        let h = 1e-5 * y.as_slice()[j].abs().max(1.0);
        let mut cols = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut yv = y.as_slice().to_vec();
            yv[j] += sign * h;
            let yp = LineParams::from_flat(yv);
            let xp = exact_power_flow(net, &yp, &u, x)?;
            // The strict variant drops the direct parameter term of the flows.
            let meas = match mode {
                SensitivityMode::Total => net.measurement(&xp, &yp).0,
                SensitivityMode::PaperStrict => net.measurement(&xp, y).0,
            };
            cols.push(meas);
        }
        for i in 0..m {
            out[(i, j)] = (cols[0][i] - cols[1][i]) / (2.0 * h);
        }
    }
    Some(out)
}

/// A state reached by the power flow at a random dispatch and random parameters.
pub fn random_operating_point(rng: &mut impl Rng, net: &Network, nominal: &LineParams) -> (StateVector, LineParams) {
    loop {
        let y = random_params(rng, nominal);
        let u = random_input(rng, net);
        if let Some(x) = exact_power_flow(net, &y, &u, &net.flat_state()) {
            if x.0.chunks(2).all(|c| (0.8..1.2).contains(&c[0]) && c[1].abs() < 0.6) {
                return (x, y);
            }
        }
    }
}
