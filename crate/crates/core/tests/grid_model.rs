mod common;

use oedopf::grid::{directed_flow, directed_flow_partials};
use oedopf::powerflow::{solve_power_flow, PF_TOLERANCE};
use oedopf::{LineParams, Network, StateVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn flow_at_known_angle_matches_scalar_evaluation() {
    // Reference values evaluated independently in double precision.
    let (p, q) = directed_flow(1.0f64, 0.1, 1.0, 0.0, 3.523, -35.235);
    assert!((p - 3.535230761276505).abs() < 1e-12);
    assert!((q + 0.17568489041801172).abs() < 1e-12);
}

#[test]
fn doubling_voltages_scales_flows_by_four() {
    let (p, q) = directed_flow(1.0f64, 0.1, 1.0, 0.0, 3.523, -35.235);
    let (p2, q2) = directed_flow(2.0f64, 0.1, 2.0, 0.0, 3.523, -35.235);
    assert!((p2 - 4.0 * p).abs() < 1e-12 && (q2 - 4.0 * q).abs() < 1e-12);
}

#[test]
fn flow_partials_match_central_differences() {
    let point = [1.02, 0.05, 0.97, -0.08, 3.5, -35.0];
    let f = |z: &[f64]| {
        let (p, q) = directed_flow(z[0], z[1], z[2], z[3], z[4], z[5]);
        vec![p, q]
    };
    let fd = central_difference(&point, f);
    let an = directed_flow_partials(point[0], point[1], point[2], point[3], point[4], point[5]);
    assert!(worst_mismatch(&an.dp, fd.row(0), 1e-7) <= 1.0);
    assert!(worst_mismatch(&an.dq, fd.row(1), 1e-7) <= 1.0);
}

#[test]
fn case5_measurement_has_twenty_entries() {
    let (case, net) = case5_network();
    let m = net.measurement(&net.flat_state(), &case.nominal_params());
    assert_eq!(m.len(), 20);
    assert_eq!(&m.0[..8], net.flat_state().as_slice());
    assert!(m.0[8..].iter().all(|&v| v == 0.0));
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let (case, net) = case5_network();
    let nominal = case.nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let x = random_state(&mut rng, &net);
        let y = random_params(&mut rng, &nominal);
        let an = net.jacobians(&x, &y);
        let fd = fd_jacobians(&net, &x, &y);
        for (name, a, f) in [
            ("dS/dx", &an.ds_dx, &fd.ds_dx),
            ("dS/dy", &an.ds_dy, &fd.ds_dy),
            ("dM/dx", &an.dm_dx, &fd.dm_dx),
            ("dM/dy", &an.dm_dy, &fd.dm_dy),
            ("dslack/dx", &an.dslack_dx, &fd.dslack_dx),
            ("dslack/dy", &an.dslack_dy, &fd.dslack_dy),
        ] {
            assert_eq!(a.shape(), f.shape(), "{name}");
            let worst = worst_mismatch(a.as_slice(), f.as_slice(), 1e-5);
            assert!(worst <= 1.0, "{name}: {worst}");
        }
    }
}

#[test]
fn measurement_state_block_is_identity() {
    let (case, net) = case5_network();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_state(&mut rng, &net);
    let jac = net.jacobians(&x, &case.nominal_params());
    let nx = net.n_state();
    for i in 0..nx {
        for j in 0..nx {
            assert_eq!(jac.dm_dx[(i, j)], if i == j { 1.0 } else { 0.0 });
        }
    }
    assert!(jac.dm_dy.as_slice()[..nx * net.n_params()].iter().all(|&v| v == 0.0));
}

#[test]
fn conductance_columns_of_active_rows_vanish_at_flat_profile() {
    let (case, net) = case5_network();
    let jac = net.jacobians(&net.flat_state(), &case.nominal_params());
    let nl = net.n_lines();
    for pos in 0..net.n_state() / 2 {
        for line in 0..nl {
            assert_eq!(jac.ds_dy[(2 * pos, line)], 0.0);
        }
    }
}

#[test]
fn measurement_is_bit_identical_across_calls() {
    let (case, net) = case5_network();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_state(&mut rng, &net);
    let y = random_params(&mut rng, &case.nominal_params());
    assert_eq!(net.measurement(&x, &y), net.measurement(&x, &y));
}

proptest! {
    #[test]
    fn line_losses_are_non_negative(
        vk in 0.9f64..1.1, vl in 0.9f64..1.1, thk in -0.3f64..0.3, thl in -0.3f64..0.3,
        g in 0.0f64..20.0, b in -200.0f64..0.0,
    ) {
        let (pkl, _) = directed_flow(vk, thk, vl, thl, g, b);
        let (plk, _) = directed_flow(vl, thl, vk, thk, g, b);
        prop_assert!(pkl + plk >= -1e-12);
    }
}

#[test]
fn solved_points_close_the_balance() {
    let (case, net) = case5_network();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let y = random_params(&mut rng, &case.nominal_params());
        let u = random_input(&mut rng, &net);
        let Ok(pf) = solve_power_flow(&net, &y, &u, None) else { continue };
        let s = net.residual_injection(&pf.x, &y);
        for ((si, ui), di) in s.iter().zip(u.as_slice()).zip(net.demand()) {
            assert!((si - (ui - di)).abs() <= PF_TOLERANCE);
        }
        assert!(pf.residual_norm <= PF_TOLERANCE);
    }
}

#[test]
fn warm_and_cold_starts_agree() {
    let (case, net) = case5_network();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut compared = 0;
    for _ in 0..50 {
        let y = random_params(&mut rng, &case.nominal_params());
        let u = random_input(&mut rng, &net);
        let Ok(cold) = solve_power_flow(&net, &y, &u, None) else { continue };
        let warm_start = StateVector(cold.x.0.iter().map(|v| v + 0.02).collect());
        let warm = solve_power_flow(&net, &y, &u, Some(&warm_start)).unwrap();
        let diff = cold.x.0.iter().zip(&warm.x.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "warm and cold solutions differ by {diff}");
        compared += 1;
    }
    assert!(compared >= 25);
}

#[test]
fn solution_matches_independent_newton() {
    let (case, net) = case5_network();
    let truth = case.nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let u = random_input(&mut rng, &net);
    let pf = solve_power_flow(&net, &truth, &u, None).unwrap();
    let oracle = exact_power_flow(&net, &truth, &u, &net.flat_state()).unwrap();
    let diff = pf.x.0.iter().zip(&oracle.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-7);
}

#[test]
fn small_input_change_moves_state_continuously() {
    let (case, net) = case5_network();
    let truth = case.nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u = random_input(&mut rng, &net);
    let base = exact_power_flow(&net, &truth, &u, &net.flat_state()).unwrap();
    let mut values = u.as_slice().to_vec();
    let pos = net.state_position(3).unwrap();
    values[2 * pos] += 1e-6;
    let perturbed = net.input(values).unwrap();
    let moved = exact_power_flow(&net, &truth, &perturbed, &base).unwrap();
    let lu = net.jacobians(&base, &truth).ds_dx.lu().unwrap();
    let mut e = vec![0.0; net.n_state()];
    e[2 * pos] = 1e-6;
    let predicted = lu.solve(&e);
    for ((a, b), p) in moved.0.iter().zip(&base.0).zip(&predicted) {
        assert!(((a - b) - p).abs() <= 1e-10);
    }
}

#[test]
fn zero_injection_needs_no_iterations() {
    let two = two_bus(3.523, -35.235);
    let mut unloaded = two.clone();
    for bus in &mut unloaded.buses {
        bus.p_demand = 0.0;
        bus.q_demand = 0.0;
    }
    let net = Network::new(&unloaded);
    let u = net.input(vec![0.0, 0.0]).unwrap();
    let pf = solve_power_flow(&net, &LineParams::new(&[3.523], &[-35.235]), &u, None).unwrap();
    assert!(pf.iterations <= 1);
    assert_eq!(pf.x, net.flat_state());
}
