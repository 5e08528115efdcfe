//! Magnetometer calibration by batch Gauss-Newton over a factor graph.
//!
//! The estimator jointly solves for the hard-iron offset, vector-sensor bias,
//! scale and non-orthogonality, per-epoch attitude and a time-varying external
//! field. TWOSTEP and Tolles-Lawson calibrators are included for comparison,
//! together with a simulator and Monte Carlo study tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod magmodel;
pub mod measurement;
pub mod simulator;
pub mod solver;
pub mod sparse;

pub use nalgebra;

pub use baselines::{BaselineError, FilterSpec, TlConfig, TollesLawsonCoeffs, TwoStepResult};
pub use eval::{
    compute_metrics, delta_hi_experiment, run_study, DeltaReport, Estimator, EvalError, FieldMode, MetricsReport,
    StudySpec, StudyTable,
};
pub use geometry::{Dcm, EulerRpy, RotVec};
pub use graph::{FieldChangeWeight, GraphError, MagModelForm, StateVector, WeightConfig};
pub use magmodel::{CalParams, ExternalField, MagMeasurement, ScaleOrtho, SoftIron};
pub use measurement::{Epoch, MeasurementNoise, MeasurementSet};
pub use simulator::{simulate, NoiseSpec, ProfileSpec, Scenario, SimError, TruthRecord, TruthSpec};
pub use solver::{calibrate, SolveReport, SolverConfig, SolverError};
