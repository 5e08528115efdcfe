//! Factor graph for joint calibration: variable layout, factor residuals,
//! whitening and the sparse Jacobian.
//!
//! Residuals follow the measurement-minus-prediction convention `y = z - h(x)`
//! and the Jacobian is `L = dh/dx`, so the Gauss-Newton step solves
//! `L dx ~ y` and is added to the state. Attitude columns are tangent
//! coordinates of the right perturbation `C <- C exp([d]x)`.
//!
//! Rows are stacked as field changes `d^1..d^k`, gyro increments
//! `w^1..w^k`, attitudes `rpy^0..rpy^k`, magnetometers `m^0..m^k`, and
//! finally any parameter priors.

mod factors;
mod state;

pub use factors::{Factor, FactorKind};
pub use state::{Layout, StateVector};

use crate::geometry::dcm_from_rotvec;
use crate::measurement::MeasurementSet;
use crate::sparse::{CsrMatrix, Ordering};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Field-change variance used to pin the external field constant.
pub const FIXED_FIELD_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("measurement set is empty")]
    EmptyMeasurements,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance of {factor} factor is not positive definite")]
    SingularCovariance { factor: &'static str },
    #[error("predicted body field at epoch {epoch} is degenerate ({magnitude} nT)")]
    DegenerateField { epoch: usize, magnitude: f64 },
    #[error("measurement times are not strictly increasing at epoch {0}")]
    NotTimeOrdered(usize),
    #[error("invalid weight configuration: {0}")]
    InvalidWeights(String),
}

/// Which vector-magnetometer prediction the magnetometer factors use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagModelForm {
    /// `T (C e + h_hi) + h_vec`, scalar `|C e + h_hi|`.
    #[default]
    ScaledHardIron,
    /// `h_hi + T C e + h_vec`, scalar `|h_hi + T C e|`.
    UnscaledHardIron,
}

/// Covariance of the field-change factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum FieldChangeWeight {
    /// Random walk of intensity `q` nT/sqrt(hr): variance `q^2 dt / 3600` per axis.
    RandomWalk { q: f64 },
    /// Explicit per-axis variance, nT^2.
    Variance { variance: f64 },
    /// Effectively constant field ([`FIXED_FIELD_VARIANCE`]).
    Fixed,
}

impl FieldChangeWeight {
    pub fn variance(&self, dt: f64) -> f64 {
        match *self {
            FieldChangeWeight::RandomWalk { q } => q * q * dt / 3600.0,
            FieldChangeWeight::Variance { variance } => variance,
            FieldChangeWeight::Fixed => FIXED_FIELD_VARIANCE,
        }
    }
}

impl Default for FieldChangeWeight {
    fn default() -> Self {
        FieldChangeWeight::RandomWalk { q: 10.0 }
    }
}

/// Global parameter blocks that can carry a prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamBlock {
    HardIron,
    VectorBias,
    ScaleOrtho,
}

impl ParamBlock {
    pub fn offset(&self) -> usize {
        match self {
            ParamBlock::HardIron => Layout::H_HI,
            ParamBlock::VectorBias => Layout::H_VEC,
            ParamBlock::ScaleOrtho => Layout::T_VEC,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ParamBlock::ScaleOrtho => 6,
            _ => 3,
        }
    }
}

/// Gaussian prior `N(mean, sigma^2 I)` on a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ParamPrior {
    pub block: ParamBlock,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct WeightConfig {
    pub field_change: FieldChangeWeight,
    pub model_form: MagModelForm,
    pub priors: Vec<ParamPrior>,
}

impl WeightConfig {
    pub fn fixed_field() -> Self {
        WeightConfig {
            field_change: FieldChangeWeight::Fixed,
            ..WeightConfig::default()
        }
    }
}

/// `W` with `W^T W = cov^-1`, the inverse lower Cholesky factor.
fn sqrt_information(cov: DMatrix<f64>, factor: &'static str) -> Result<DMatrix<f64>, GraphError> {
    let err = GraphError::SingularCovariance { factor };
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(err);
    }
    let chol = cov.cholesky().ok_or(err.clone())?;
    let n = chol.l().nrows();
    chol.l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .filter(|w| w.iter().all(|v| v.is_finite()))
        .ok_or(err)
}

/// All factors of one calibration problem.
#[derive(Debug, Clone)]
pub struct FactorSet {
    layout: Layout,
    form: MagModelForm,
    factors: Vec<Factor>,
}

impl FactorSet {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn model_form(&self) -> MagModelForm {
        self.form
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Mutable access for callers that reorder or edit factors.
    pub fn factors_mut(&mut self) -> &mut Vec<Factor> {
        &mut self.factors
    }

    pub fn rows(&self) -> usize {
        self.factors.iter().map(Factor::dim).sum()
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    fn check_state(&self, state: &StateVector) -> Result<(), GraphError> {
        if state.epochs() != self.layout.epochs() || state.attitudes.len() != state.fields.len() {
            return Err(GraphError::DimensionMismatch {
                expected: self.layout.epochs(),
                got: state.epochs(),
            });
        }
        Ok(())
    }

    /// Unwhitened residual `z - h(x)` in factor order.
    pub fn residual(&self, state: &StateVector) -> Result<DVector<f64>, GraphError> {
        self.check_state(state)?;
        let dcms = state.dcms();
        let mut out = Vec::with_capacity(self.rows());
        for f in &self.factors {
            out.extend(f.residual(state, &dcms, self.form)?.iter());
        }
        Ok(DVector::from_vec(out))
    }

    /// Whitened residual only.
    pub fn whitened_residual(&self, state: &StateVector) -> Result<DVector<f64>, GraphError> {
        self.check_state(state)?;
        let dcms = state.dcms();
        let parts = self
            .factors
            .par_iter()
            .map(|f| f.residual(state, &dcms, self.form).map(|r| f.sqrt_info() * r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DVector::from_iterator(
            self.rows(),
            parts.iter().flat_map(|p| p.iter().copied()),
        ))
    }

    /// `|y|^2` of the whitened residual.
    pub fn cost(&self, state: &StateVector) -> Result<f64, GraphError> {
        Ok(self.whitened_residual(state)?.norm_squared())
    }

    /// Whitened residual and Jacobian.
    pub fn linearize(&self, state: &StateVector) -> Result<SparseSystem, GraphError> {
        self.check_state(state)?;
        let dcms = state.dcms();
        let parts = self
            .factors
            .par_iter()
            .map(|f| f.linearize(state, &dcms, self.form))
            .collect::<Result<Vec<_>, _>>()?;
        let nrows = self.rows();
        let mut y = Vec::with_capacity(nrows);
        let mut rows = Vec::with_capacity(nrows);
        for p in &parts {
            for r in 0..p.residual.len() {
                y.push(p.residual[r]);
                rows.push(
                    p.cols
                        .iter()
                        .enumerate()
                        .map(|(c, &col)| (col, p.jacobian[(r, c)]))
                        .collect(),
                );
            }
        }
        Ok(SparseSystem {
            y: DVector::from_vec(y),
            l: CsrMatrix::from_rows(self.layout.dim(), rows),
        })
    }

    /// Elimination order: per-epoch `[e^k, C^k]` blocks in time order, then
    /// the global parameter columns.
    pub fn elimination_ordering(&self) -> Ordering {
        arrow_ordering(self.layout)
    }
}

/// Time-interleaved ordering with the 12 global columns last.
pub fn arrow_ordering(layout: Layout) -> Ordering {
    let mut seq = Vec::with_capacity(layout.dim());
    for k in 0..layout.epochs() {
        seq.extend(layout.field(k)..layout.field(k) + 3);
        seq.extend(layout.attitude(k)..layout.attitude(k) + 3);
    }
    seq.extend(0..Layout::PARAMS);
    Ordering::from_sequence(seq)
}

/// Whitened linear system `(L, y)`.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub y: DVector<f64>,
    pub l: CsrMatrix,
}

impl SparseSystem {
    pub fn cost(&self) -> f64 {
        self.y.norm_squared()
    }

    /// `L^T y`.
    pub fn gradient(&self) -> DVector<f64> {
        self.l.tr_mul_vec(&self.y)
    }
}

/// One factor per measurement plus `k` field-change factors.
pub fn build_graph(meas: &MeasurementSet, weights: &WeightConfig) -> Result<FactorSet, GraphError> {
    if meas.is_empty() {
        return Err(GraphError::EmptyMeasurements);
    }
    for k in 1..meas.len() {
        if !(meas.epochs[k].t > meas.epochs[k - 1].t) {
            return Err(GraphError::NotTimeOrdered(k));
        }
    }
    let layout = Layout::new(meas.len());
    let n = meas.len();

    let dvar = weights.field_change.variance(meas.dt);
    let w_field = sqrt_information(DMatrix::from_diagonal_element(3, 3, dvar), "field-change")?;
    let w_gyro = sqrt_information(mat3(&meas.noise.gyro), "gyro")?;
    let w_att = sqrt_information(mat3(&meas.noise.attitude), "attitude")?;
    let w_mag = sqrt_information(mat4(&meas.noise.mag), "magnetometer")?;

    let mut factors = Vec::with_capacity(4 * n);
    for k in 1..n {
        factors.push(Factor::FieldChange {
            step: k,
            sqrt_info: w_field.clone(),
        });
    }
    for k in 1..n {
        factors.push(Factor::Gyro {
            step: k,
            measured: dcm_from_rotvec(&meas.epochs[k].gyro),
            sqrt_info: w_gyro.clone(),
        });
    }
    for (k, ep) in meas.epochs.iter().enumerate() {
        factors.push(Factor::Attitude {
            epoch: k,
            measured: crate::geometry::dcm_from_euler(&ep.rpy),
            sqrt_info: w_att.clone(),
        });
    }
    for (k, ep) in meas.epochs.iter().enumerate() {
        factors.push(Factor::Magnetometer {
            epoch: k,
            measured: ep.mag.as_vector4(),
            sqrt_info: w_mag.clone(),
        });
    }
    for p in &weights.priors {
        if p.mean.len() != p.block.size() {
            return Err(GraphError::InvalidWeights(format!(
                "prior on {:?} needs {} values, got {}",
                p.block,
                p.block.size(),
                p.mean.len()
            )));
        }
        let cov = DMatrix::from_diagonal_element(p.block.size(), p.block.size(), p.sigma * p.sigma);
        factors.push(Factor::Prior {
            block: p.block,
            mean: DVector::from_vec(p.mean.clone()),
            sqrt_info: sqrt_information(cov, "prior")?,
        });
    }

    Ok(FactorSet {
        layout,
        form: weights.model_form,
        factors,
    })
}

fn mat3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

fn mat4(m: &Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(4, 4, m.iter().copied())
}

/// Unwhitened residual of `state` against `meas`.
pub fn residual(
    state: &StateVector,
    meas: &MeasurementSet,
    weights: &WeightConfig,
) -> Result<DVector<f64>, GraphError> {
    build_graph(meas, weights)?.residual(state)
}

/// Whitened residual and sparse Jacobian of `state` against `meas`.
pub fn jacobian(
    state: &StateVector,
    meas: &MeasurementSet,
    weights: &WeightConfig,
) -> Result<SparseSystem, GraphError> {
    build_graph(meas, weights)?.linearize(state)
}
