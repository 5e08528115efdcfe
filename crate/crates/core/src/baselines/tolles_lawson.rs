use crate::measurement::MeasurementSet;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{BaselineError, FilterSpec};

const MAX_CONDITION: f64 = 1e12;

/// Coefficient groups included in the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TlTerms {
    pub permanent: bool,
    pub induced: bool,
    pub eddy: bool,
}

impl Default for TlTerms {
    fn default() -> Self {
        TlTerms {
            permanent: true,
            induced: true,
            eddy: true,
        }
    }
}

impl TlTerms {
    pub fn count(&self) -> usize {
        3 * self.permanent as usize + 6 * self.induced as usize + 9 * self.eddy as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TlConfig {
    pub terms: TlTerms,
    pub filter: FilterSpec,
    /// Ridge weight relative to the largest squared singular value of the
    /// column-normalized regressors.
    pub ridge: f64,
    /// Reflection padding for forward-backward filtering, s.
    pub pad_seconds: f64,
}

impl Default for TlConfig {
    fn default() -> Self {
        TlConfig {
            terms: TlTerms::default(),
            filter: FilterSpec::default(),
            ridge: 1e-8,
            pad_seconds: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TollesLawsonCoeffs {
    pub terms: TlTerms,
    /// Permanent `[x, y, z]`, induced `[xx, xy, xz, yy, yz, zz]`, eddy
    /// `[x x', x y', ..., z z']`, in that order for the enabled groups.
    pub coefficients: Vec<f64>,
}

impl TollesLawsonCoeffs {
    fn group(&self, enabled: bool, before: usize, len: usize) -> Option<&[f64]> {
        enabled.then(|| &self.coefficients[before..before + len])
    }

    /// Permanent-moment coefficients, nT; the hard-iron estimate.
    pub fn permanent(&self) -> Option<Vector3<f64>> {
        self.group(self.terms.permanent, 0, 3).map(Vector3::from_column_slice)
    }

    pub fn induced(&self) -> Option<&[f64]> {
        self.group(self.terms.induced, 3 * self.terms.permanent as usize, 6)
    }

    pub fn eddy(&self) -> Option<&[f64]> {
        let before = 3 * self.terms.permanent as usize + 6 * self.terms.induced as usize;
        self.group(self.terms.eddy, before, 9)
    }

    /// Scalar channel with the modeled platform interference removed.
    pub fn compensate(&self, meas: &MeasurementSet) -> Vec<f64> {
        let a = tolles_lawson_regressors(meas, self.terms);
        let c = DVector::from_column_slice(&self.coefficients);
        let interference = a * c;
        meas.scalar_samples()
            .zip(interference.iter())
            .map(|(s, i)| s - i)
            .collect()
    }
}

/// Regressor matrix from vector-magnetometer direction cosines.
pub fn tolles_lawson_regressors(meas: &MeasurementSet, terms: TlTerms) -> DMatrix<f64> {
    let b: Vec<Vector3<f64>> = meas.vector_samples().collect();
    let n = b.len();
    let mag: Vec<f64> = b.iter().map(|v| v.norm()).collect();
    let u: Vec<Vector3<f64>> = b.iter().zip(&mag).map(|(v, m)| v / *m).collect();
    let du: Vec<Vector3<f64>> = (0..n)
        .map(|k| match (k, n) {
            (_, 1) => Vector3::zeros(),
            (0, _) => (u[1] - u[0]) / meas.dt,
            (k, n) if k == n - 1 => (u[k] - u[k - 1]) / meas.dt,
            (k, _) => (u[k + 1] - u[k - 1]) / (2.0 * meas.dt),
        })
        .collect();
    let mut a = DMatrix::zeros(n, terms.count());
    for k in 0..n {
        let mut col = 0;
        let mut put = |v: f64| {
            a[(k, col)] = v;
            col += 1;
        };
        if terms.permanent {
            (0..3).for_each(|i| put(u[k][i]));
        }
        if terms.induced {
            for i in 0..3 {
                for j in i..3 {
                    put(mag[k] * u[k][i] * u[k][j]);
                }
            }
        }
        if terms.eddy {
            for ui in u[k].iter() {
                for dj in du[k].iter() {
                    put(mag[k] * ui * dj);
                }
            }
        }
    }
    a
}

/// Band-passed least-squares fit of the scalar channel on the regressors.
pub fn tolles_lawson_calibrate(meas: &MeasurementSet, cfg: &TlConfig) -> Result<TollesLawsonCoeffs, BaselineError> {
    let p = cfg.terms.count();
    if p == 0 {
        return Err(BaselineError::InvalidInput("no coefficient groups enabled".into()));
    }
    if !(cfg.ridge >= 0.0) || !(cfg.pad_seconds >= 0.0) {
        return Err(BaselineError::InvalidInput(
            "ridge and padding must be nonnegative".into(),
        ));
    }
    let n = meas.len();
    let needed = 2 * p;
    if n < needed {
        return Err(BaselineError::InsufficientData { needed, got: n });
    }
    let cascade = cfg.filter.design(1.0 / meas.dt)?;
    let pad = (cfg.pad_seconds / meas.dt).round() as usize;

    let raw = tolles_lawson_regressors(meas, cfg.terms);
    let scalar: Vec<f64> = meas.scalar_samples().collect();
    let y = DVector::from_vec(cascade.filtfilt(&scalar, pad));
    let mut a = DMatrix::zeros(n, p);
    let mut scale = DVector::zeros(p);
    for j in 0..p {
        let col: Vec<f64> = raw.column(j).iter().copied().collect();
        let filtered = DVector::from_vec(cascade.filtfilt(&col, pad));
        scale[j] = filtered.norm();
        a.set_column(j, &filtered);
    }
    let largest = scale.max();
    if !(largest > 0.0) || scale.iter().any(|s| !(*s > 1e-12 * largest)) {
        return Err(BaselineError::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    for j in 0..p {
        let s = scale[j];
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    // sum_i u_i^2 = 1 and u . du/dt = 0 leave up to two near-null directions
    // that the ridge term settles; anything beyond that is missing excitation
    let structural = cfg.terms.induced as usize + cfg.terms.eddy as usize;
    let condition = sv[0] / sv[p - 1 - structural.min(p - 1)];
    if !(condition <= MAX_CONDITION) {
        return Err(BaselineError::RankDeficient { condition });
    }
    let mut normal = a.transpose() * &a;
    let lambda = cfg.ridge * sv[0].powi(2);
    for j in 0..p {
        normal[(j, j)] += lambda;
    }
    let rhs = a.transpose() * y;
    let c_hat = normal
        .cholesky()
        .ok_or(BaselineError::RankDeficient { condition })?
        .solve(&rhs);
    Ok(TollesLawsonCoeffs {
        terms: cfg.terms,
        coefficients: c_hat.iter().zip(scale.iter()).map(|(c, s)| c / s).collect(),
    })
}
