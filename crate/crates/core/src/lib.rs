//! Cost-aware experiment design for estimating transmission-line parameters.
//!
//! The crate models a meshed AC grid with unknown line conductances and
//! susceptances, estimates them by maximum likelihood from noisy snapshots,
//! and chooses generator set-points that trade generation cost against the
//! predicted variance of the next estimate.

pub mod autotune;
pub mod case_io;
pub mod estimator;
pub mod grid;
pub mod linalg;
pub mod nlp;
pub mod oed;
pub mod powerflow;
pub mod runner;
pub mod scalar;

pub use case_io::{parse_experiment_config, parse_matpower_case, parse_native_case, ExperimentConfig, GridCase, Strategy};
pub use estimator::{mle_update, Belief};
pub use grid::{InputVector, LineParams, MeasurementVector, Network, StateVector};
pub use oed::{fisher, sensitivity, solve_decision, DecisionKind, NoiseModel, SensitivityMode};
pub use powerflow::solve_power_flow;
pub use scalar::{Dual, Scalar};

pub type Dual64 = Dual<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type LineParams64 = LineParams<f64>;
pub type StateVector64 = StateVector<f64>;
