mod common;

use oedopf::case_io::case5;
use oedopf::runner::{
    iteration_csv_header, mean_relative_errors, run_algorithm, simulate_measurement, write_iterations_csv,
    write_summary_json, RunSummary, TerminationReason,
};
use oedopf::{parse_experiment_config, solve_power_flow, LineParams, NoiseModel, Strategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn mean_relative_errors_of_the_published_estimates() {
    let truth = LineParams::new(
        &[3.523, 3.257, 15.470, 9.168, 3.334, 3.334],
        &[-35.235, -32.569, -154.703, -91.676, -33.337, -33.337],
    );
    let estimate = LineParams::new(
        &[3.529, 3.167, 14.445, 9.429, 3.896, 3.223],
        &[-35.322, -32.703, -153.152, -91.746, -32.474, -33.305],
    );
    let (g, b) = mean_relative_errors(&estimate, &truth).unwrap();
    assert!((g - 0.05432022857789059).abs() < 1e-12, "MRE_g = {g}");
    assert!((b - 0.007369957530116757).abs() < 1e-12, "MRE_b = {b}");

    let double = |y: &LineParams| LineParams::from_flat(y.as_slice().iter().map(|v| 2.0 * v).collect());
    let (g2, b2) = mean_relative_errors(&double(&estimate), &double(&truth)).unwrap();
    assert!((g2 - g).abs() < 1e-15 && (b2 - b).abs() < 1e-15);
}

#[test]
fn zero_noise_measures_the_model() {
    let (case, net) = case5_network();
    let truth = case.nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let u = random_input(&mut rng, &net);
    let exact = NoiseModel::isotropic(0.0, net.n_measurements());
    let (eta, x) = simulate_measurement(&net, &truth, &u, &exact, 7, 3, None).unwrap();
    let pf = solve_power_flow(&net, &truth, &u, None).unwrap();
    assert_eq!(x, pf.x);
    assert_eq!(eta, net.measurement(&pf.x, &truth));
}

#[test]
fn measurement_noise_has_the_configured_moments() {
    let (case, net) = case5_network();
    let truth = case.nominal_params();
    let u = net.input_projected(vec![0.0; net.n_state()]);
    let variance = 1e-4;
    let noise = NoiseModel::isotropic(variance, net.n_measurements());
    let exact = NoiseModel::isotropic(0.0, net.n_measurements());
    let (clean, _) = simulate_measurement(&net, &truth, &u, &exact, 0, 0, None).unwrap();
    let mut draws = Vec::new();
    for k in 0..5000 {
        let (eta, _) = simulate_measurement(&net, &truth, &u, &noise, 5, k, None).unwrap();
        draws.extend(eta.as_slice().iter().zip(clean.as_slice()).map(|(a, b)| a - b));
    }
    let n = draws.len() as f64;
    assert_eq!(draws.len(), 100_000);
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 3.0 * variance.sqrt() / n.sqrt(), "mean {mean}");
    assert!((var - variance).abs() <= 3.0 * variance * (2.0 / n).sqrt(), "variance {var}");
}

#[test]
fn same_seed_gives_the_same_noise() {
    let (case, net) = case5_network();
    let truth = case.nominal_params();
    let u = net.input_projected(vec![0.0; net.n_state()]);
    let noise = NoiseModel::isotropic(1e-4, net.n_measurements());
    let a = simulate_measurement(&net, &truth, &u, &noise, 9, 4, None).unwrap().0;
    let b = simulate_measurement(&net, &truth, &u, &noise, 9, 4, None).unwrap().0;
    let c = simulate_measurement(&net, &truth, &u, &noise, 9, 5, None).unwrap().0;
    let d = simulate_measurement(&net, &truth, &u, &noise, 10, 4, None).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
}

fn without_timing(mut s: RunSummary) -> RunSummary {
    for r in &mut s.records {
        r.wall_time_s = 0.0;
    }
    s
}

#[test]
fn runs_are_reproducible() {
    let case = case5();
    for strategy in Strategy::ALL {
        let text = format!("horizon = 3\nrng_seed = 11\nstrategy = \"{strategy}\"\nrho_grid = {{ min = 1e-4, max = 1e2, points = 5 }}");
        let config = parse_experiment_config(&text).unwrap();
        let first = without_timing(run_algorithm(&case, &config).unwrap());
        let second = without_timing(run_algorithm(&case, &config).unwrap());
        assert_eq!(first.error, None, "{strategy}");
        assert_eq!(first, second, "{strategy}");
        assert_eq!(first.records.len(), 3);
        assert!(first.records.windows(2).all(|w| w[1].trace_v <= w[0].trace_v));
    }
}

#[test]
fn single_step_horizon() {
    let case = case5();
    let config = parse_experiment_config("horizon = 1\nstrategy = \"opf_mle\"").unwrap();
    let s = run_algorithm(&case, &config).unwrap();
    assert_eq!(s.records.len(), 1);
    assert_eq!(s.terminated_at, 1);
    assert_eq!(s.reason, TerminationReason::Horizon);
    assert!((s.hours - 0.25).abs() < 1e-12);
    assert_eq!(s.final_estimates.len(), 6);
    assert_eq!((s.final_estimates[0].from, s.final_estimates[0].to), (1, 2));
    assert!(s.records[0].rho.is_none());
}

#[test]
fn twenty_five_steps_are_six_and_a_quarter_hours() {
    let config = parse_experiment_config("").unwrap();
    assert!((config.hours_for_steps(25) - 6.25).abs() < 1e-12);
}

#[test]
fn output_writers() {
    let case = case5();
    let config = parse_experiment_config("horizon = 2\nstrategy = \"opf_mle\"\ntarget_variance_trace = 1e-12").unwrap();
    let s = run_algorithm(&case, &config).unwrap();
    assert_eq!(s.records.len(), 2);

    let mut csv_out = Vec::new();
    write_iterations_csv(&s.records, &mut csv_out).unwrap();
    let mut reader = csv::Reader::from_reader(csv_out.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, iteration_csv_header(8, 20, 6));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, rec) in rows.iter().zip(&s.records) {
        assert_eq!(row.len(), header.len());
        assert_eq!(row[1].to_string(), "opf_mle");
        assert_eq!(row[3].parse::<f64>().unwrap(), rec.trace_v);
        assert_eq!(row[header.len() - 1].parse::<f64>().unwrap(), rec.estimate.b(5));
    }

    let mut json_out = Vec::new();
    write_summary_json(&s, &mut json_out).unwrap();
    let back: RunSummary = serde_json::from_slice(&json_out).unwrap();
    assert_eq!(back, s);
}
