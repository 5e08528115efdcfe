//! Accuracy metrics, Monte Carlo studies and before/after hard-iron
//! comparisons.

use crate::baselines::{tolles_lawson_calibrate, twostep_with, TlConfig, TwoStepConfig};
use crate::graph::{FieldChangeWeight, StateVector, WeightConfig};
use crate::measurement::MeasurementSet;
use crate::simulator::{derive_seed, simulate, Scenario, SimError, TruthRecord};
use crate::solver::{calibrate, SolveReport, SolverConfig, SolverError};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: truth has {truth} epochs, estimate has {estimate}")]
    LengthMismatch { truth: usize, estimate: usize },
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MetricsReport {
    /// RMS of the field-magnitude error over all epochs, nT.
    pub rmse_field: f64,
    /// Hard-iron error norm, nT.
    pub eps_hi: f64,
    /// RMS scale-factor error.
    pub eps_scale: f64,
    /// RMS non-orthogonality angle error, rad.
    pub eps_ortho: f64,
    /// Signed `h_hi - h_hi_hat` per axis, nT.
    pub hi_error: [f64; 3],
}

pub fn compute_metrics(truth: &TruthRecord, estimate: &StateVector) -> Result<MetricsReport, EvalError> {
    let n = truth.fields.len();
    if estimate.fields.len() != n || n == 0 {
        return Err(EvalError::LengthMismatch {
            truth: n,
            estimate: estimate.fields.len(),
        });
    }
    let sq: f64 = truth
        .fields
        .iter()
        .zip(&estimate.fields)
        .map(|(e, e_hat)| (e.norm() - e_hat.norm()).powi(2))
        .sum();
    let t = truth.cal.t_vec.to_array();
    let t_hat = estimate.cal.t_vec.to_array();
    let rms3 = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 3.0).sqrt();
    let hi = truth.cal.h_hi - estimate.cal.h_hi;
    Ok(MetricsReport {
        rmse_field: (sq / n as f64).sqrt(),
        eps_hi: hi.norm(),
        eps_scale: rms3(&t[..3], &t_hat[..3]),
        eps_ortho: rms3(&t[3..], &t_hat[3..]),
        hi_error: hi.into(),
    })
}

/// RMS deviation of the true field magnitude from that of its time mean:
/// the error floor of a constant-field assumption.
pub fn field_drift_rms(truth: &TruthRecord) -> f64 {
    let n = truth.fields.len() as f64;
    let mean = truth.fields.iter().sum::<Vector3<f64>>() / n;
    let m = mean.norm();
    (truth.fields.iter().map(|e| (e.norm() - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Factor graph estimating a time-varying field.
    Fg,
    /// Factor graph holding the field constant.
    FgFixed,
    Twostep,
    Tl,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Fg, Estimator::FgFixed, Estimator::Twostep, Estimator::Tl];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Fg => "fg",
            Estimator::FgFixed => "fg-fixed",
            Estimator::Twostep => "twostep",
            Estimator::Tl => "tl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum FieldMode {
    Constant,
    /// Random-walk field with intensity `q`, nT/sqrt(hr).
    RandomWalk {
        q: f64,
    },
}

impl FieldMode {
    pub fn q(&self) -> f64 {
        match *self {
            FieldMode::Constant => 0.0,
            FieldMode::RandomWalk { q } => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct StudySpec {
    pub runs: usize,
    /// Hard-iron magnitudes to sweep, nT.
    pub hi_magnitudes: Vec<f64>,
    pub field_modes: Vec<FieldMode>,
    pub estimators: Vec<Estimator>,
    pub base_seed: u64,
    /// Base scenario; hard-iron magnitude and field random walk are set per cell.
    pub scenario: Scenario,
    pub solver: SolverConfig,
    /// Field-change weighting of the `fg` estimator. When absent it follows
    /// the cell's random-walk intensity, or the default for a constant field.
    pub fg_weighting: Option<FieldChangeWeight>,
    pub twostep: TwoStepConfig,
    pub tolles_lawson: TlConfig,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            runs: 20,
            hi_magnitudes: vec![0.0, 500.0, 1000.0, 2500.0, 5000.0],
            field_modes: vec![FieldMode::Constant],
            estimators: Estimator::ALL.to_vec(),
            base_seed: 1,
            scenario: Scenario::default(),
            solver: SolverConfig::default(),
            fg_weighting: None,
            twostep: TwoStepConfig::default(),
            tolles_lawson: TlConfig::default(),
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidStudy(m.into()));
        if self.runs == 0 {
            return bad("run count must be at least 1");
        }
        if self.hi_magnitudes.is_empty() || self.hi_magnitudes.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return bad("hard-iron magnitudes must be a nonempty list of finite nonnegative values");
        }
        if self.field_modes.is_empty() || self.field_modes.iter().any(|f| !(f.q() >= 0.0 && f.q().is_finite())) {
            return bad("field modes must be nonempty with finite nonnegative q");
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required");
        }
        self.solver
            .validate()
            .map_err(|e| EvalError::InvalidStudy(e.to_string()))?;
        self.scenario.profile.validate()?;
        self.scenario.truth.validate()?;
        self.scenario.noise.validate()?;
        Ok(())
    }

    /// Seed of run `run`, shared by every cell so magnitudes and field modes
    /// are compared on common random numbers.
    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.base_seed, run as u64)
    }

    fn scenario_for(&self, magnitude: f64, field: FieldMode) -> Scenario {
        let mut s = self.scenario.clone();
        s.truth.h_hi_magnitude = magnitude;
        s.noise.field_random_walk = field.q();
        s
    }

    fn weights_for(&self, estimator: Estimator, field: FieldMode) -> WeightConfig {
        match estimator {
            Estimator::FgFixed => WeightConfig::fixed_field(),
            _ => WeightConfig {
                field_change: self.fg_weighting.unwrap_or(match field {
                    FieldMode::Constant => FieldChangeWeight::default(),
                    FieldMode::RandomWalk { q } => FieldChangeWeight::RandomWalk {
                        q: q.max(f64::MIN_POSITIVE),
                    },
                }),
                ..WeightConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One estimator applied to one simulated run. Metrics an estimator does not
/// produce are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub estimator: Estimator,
    pub hi_magnitude: f64,
    pub field_q: f64,
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub eps_hi: Option<f64>,
    pub rmse_field: Option<f64>,
    pub eps_scale: Option<f64>,
    pub eps_ortho: Option<f64>,
    pub hi_err_x: Option<f64>,
    pub hi_err_y: Option<f64>,
    pub hi_err_z: Option<f64>,
    pub drift_rms: f64,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Summary of finite values; `None` when there are none.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stats> {
        let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            p90: quantile(&v, 0.9),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregates of one (field mode, magnitude, estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CellSummary {
    pub estimator: Estimator,
    pub hi_magnitude: f64,
    pub field_q: f64,
    pub runs: usize,
    pub failures: usize,
    pub eps_hi: Option<Stats>,
    pub rmse_field: Option<Stats>,
    pub eps_scale: Option<Stats>,
    pub eps_ortho: Option<Stats>,
    pub drift_rms: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub cells: Vec<CellSummary>,
}

impl StudyTable {
    pub fn cell(&self, estimator: Estimator, hi_magnitude: f64, field_q: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.hi_magnitude == hi_magnitude && c.field_q == field_q)
    }
}

fn cell_order(a: &StudyRow, b: &StudyRow) -> Ordering {
    a.field_q
        .total_cmp(&b.field_q)
        .then(a.hi_magnitude.total_cmp(&b.hi_magnitude))
        .then(a.estimator.cmp(&b.estimator))
}

/// Per-cell aggregates. The result does not depend on row order.
pub fn summarize(rows: &[StudyRow]) -> Vec<CellSummary> {
    let mut sorted: Vec<&StudyRow> = rows.iter().collect();
    sorted.sort_by(|a, b| cell_order(a, b).then(a.run.cmp(&b.run)));
    sorted
        .chunk_by(|a, b| cell_order(a, b) == Ordering::Equal)
        .map(|cell| {
            let ok: Vec<&&StudyRow> = cell.iter().filter(|r| r.status == RunStatus::Ok).collect();
            let stat = |f: fn(&StudyRow) -> Option<f64>| Stats::of(ok.iter().filter_map(|r| f(r)));
            CellSummary {
                estimator: cell[0].estimator,
                hi_magnitude: cell[0].hi_magnitude,
                field_q: cell[0].field_q,
                runs: cell.len(),
                failures: cell.len() - ok.len(),
                eps_hi: stat(|r| r.eps_hi),
                rmse_field: stat(|r| r.rmse_field),
                eps_scale: stat(|r| r.eps_scale),
                eps_ortho: stat(|r| r.eps_ortho),
                drift_rms: Stats::of(cell.iter().map(|r| r.drift_rms)),
            }
        })
        .collect()
}

struct Job {
    magnitude: f64,
    field: FieldMode,
    run: usize,
}

fn failed_row(base: StudyRow, message: String) -> StudyRow {
    StudyRow {
        status: RunStatus::Failed,
        error: Some(message),
        ..base
    }
}

fn estimate(
    spec: &StudySpec,
    estimator: Estimator,
    field: FieldMode,
    truth: &TruthRecord,
    meas: &MeasurementSet,
    base: StudyRow,
) -> StudyRow {
    let hi_row = |h_hat: Vector3<f64>, base: StudyRow| {
        let err = truth.cal.h_hi - h_hat;
        StudyRow {
            eps_hi: Some(err.norm()),
            hi_err_x: Some(err.x),
            hi_err_y: Some(err.y),
            hi_err_z: Some(err.z),
            ..base
        }
    };
    match estimator {
        Estimator::Fg | Estimator::FgFixed => {
            let weights = spec.weights_for(estimator, field);
            match calibrate(meas, &weights, &spec.solver) {
                Ok(report) => match compute_metrics(truth, &report.state) {
                    Ok(m) => StudyRow {
                        eps_hi: Some(m.eps_hi),
                        rmse_field: Some(m.rmse_field),
                        eps_scale: Some(m.eps_scale),
                        eps_ortho: Some(m.eps_ortho),
                        hi_err_x: Some(m.hi_error[0]),
                        hi_err_y: Some(m.hi_error[1]),
                        hi_err_z: Some(m.hi_error[2]),
                        iterations: Some(report.iterations),
                        converged: Some(report.converged),
                        ..base
                    },
                    Err(e) => failed_row(base, e.to_string()),
                },
                Err(e) => failed_row(base, e.to_string()),
            }
        }
        Estimator::Twostep => match twostep_with(meas, truth.fields[0].norm(), &spec.twostep) {
            Ok(r) => hi_row(
                r.bias,
                StudyRow {
                    iterations: Some(r.iterations),
                    converged: Some(r.converged),
                    ..base
                },
            ),
            Err(e) => failed_row(base, e.to_string()),
        },
        Estimator::Tl => match tolles_lawson_calibrate(meas, &spec.tolles_lawson) {
            Ok(c) => match c.permanent() {
                Some(p) => hi_row(p, base),
                None => failed_row(base, "permanent terms disabled".into()),
            },
            Err(e) => failed_row(base, e.to_string()),
        },
    }
}

fn run_job(spec: &StudySpec, job: &Job) -> Vec<StudyRow> {
    let seed = spec.run_seed(job.run);
    let blank = |estimator, drift_rms| StudyRow {
        estimator,
        hi_magnitude: job.magnitude,
        field_q: job.field.q(),
        run: job.run,
        seed,
        status: RunStatus::Ok,
        error: None,
        eps_hi: None,
        rmse_field: None,
        eps_scale: None,
        eps_ortho: None,
        hi_err_x: None,
        hi_err_y: None,
        hi_err_z: None,
        drift_rms,
        iterations: None,
        converged: None,
    };
    match simulate(&spec.scenario_for(job.magnitude, job.field), seed) {
        Ok((truth, meas)) => {
            let drift = field_drift_rms(&truth);
            spec.estimators
                .iter()
                .map(|&est| estimate(spec, est, job.field, &truth, &meas, blank(est, drift)))
                .collect()
        }
        Err(e) => spec
            .estimators
            .iter()
            .map(|&est| failed_row(blank(est, f64::NAN), e.to_string()))
            .collect(),
    }
}

/// Runs every (field mode, magnitude, run) simulation in parallel and applies
/// each estimator to the same measurements. Estimator failures become flagged
/// rows. Output is independent of thread scheduling.
pub fn run_study(spec: &StudySpec) -> Result<StudyTable, EvalError> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for &field in &spec.field_modes {
        for &magnitude in &spec.hi_magnitudes {
            for run in 0..spec.runs {
                jobs.push(Job { magnitude, field, run });
            }
        }
    }
    let rows: Vec<StudyRow> = jobs.par_iter().flat_map_iter(|j| run_job(spec, j)).collect();
    let cells = summarize(&rows);
    Ok(StudyTable { rows, cells })
}

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error("calibration of the before set failed: {0}")]
    Before(#[source] SolverError),
    #[error("calibration of the after set failed: {0}")]
    After(#[source] SolverError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DeltaReport {
    pub before_h_hi: Vector3<f64>,
    pub after_h_hi: Vector3<f64>,
    /// `h_hi_hat(after) - h_hi_hat(before)`.
    pub delta: Vector3<f64>,
    pub reference: Option<Vector3<f64>>,
    /// `delta - reference`.
    pub error: Option<Vector3<f64>>,
    pub error_norm: Option<f64>,
    pub before_converged: bool,
    pub after_converged: bool,
}

/// Calibrates both sets independently and differences the hard-iron estimates.
pub fn delta_hi_experiment(
    before: &MeasurementSet,
    after: &MeasurementSet,
    weights: &WeightConfig,
    solver: &SolverConfig,
    reference: Option<Vector3<f64>>,
) -> Result<DeltaReport, DeltaError> {
    let (b, a): (Result<SolveReport, _>, Result<SolveReport, _>) = rayon::join(
        || calibrate(before, weights, solver),
        || calibrate(after, weights, solver),
    );
    let b = b.map_err(DeltaError::Before)?;
    let a = a.map_err(DeltaError::After)?;
    let delta = a.state.cal.h_hi - b.state.cal.h_hi;
    let error = reference.map(|r| delta - r);
    Ok(DeltaReport {
        before_h_hi: b.state.cal.h_hi,
        after_h_hi: a.state.cal.h_hi,
        delta,
        reference,
        error,
        error_norm: error.map(|e| e.norm()),
        before_converged: b.converged,
        after_converged: a.converged,
    })
}
