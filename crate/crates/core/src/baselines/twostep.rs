use crate::measurement::MeasurementSet;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::BaselineError;

const MIN_SAMPLES: usize = 12;
const MAX_CONDITION: f64 = 1e10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TwoStepConfig {
    pub max_iterations: usize,
    /// Stop when the bias update is below this, nT.
    pub step_tolerance: f64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig {
            max_iterations: 50,
            step_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepResult {
    /// Combined offset of the vector channel, nT.
    pub bias: Vector3<f64>,
    /// First-step (centered) estimate.
    pub centered: Vector3<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Second-step cost, starting at the centered estimate.
    pub cost_history: Vec<f64>,
}

fn cost(b: &[Vector3<f64>], z: &[f64], bias: &Vector3<f64>) -> f64 {
    let bb = bias.norm_squared();
    b.iter()
        .zip(z)
        .map(|(bk, zk)| (zk - 2.0 * bk.dot(bias) + bb).powi(2))
        .sum()
}

/// Offset-only TWOSTEP with default iteration settings.
pub fn twostep_calibrate(meas: &MeasurementSet, e_magnitude: f64) -> Result<TwoStepResult, BaselineError> {
    twostep_with(meas, e_magnitude, &TwoStepConfig::default())
}

/// Estimates `b` in `|B_k - b| = |H|` from vector samples `B_k` and a known
/// field magnitude `|H|`: a centered linear solve followed by Gauss-Newton on
/// `sum (|B_k|^2 - |H|^2 - 2 B_k . b + |b|^2)^2`.
pub fn twostep_with(
    meas: &MeasurementSet,
    e_magnitude: f64,
    cfg: &TwoStepConfig,
) -> Result<TwoStepResult, BaselineError> {
    if !(e_magnitude > 0.0 && e_magnitude.is_finite()) {
        return Err(BaselineError::InvalidInput("field magnitude must be positive".into()));
    }
    let b: Vec<Vector3<f64>> = meas.vector_samples().collect();
    if b.len() < MIN_SAMPLES {
        return Err(BaselineError::InsufficientData {
            needed: MIN_SAMPLES,
            got: b.len(),
        });
    }
    let h2 = e_magnitude * e_magnitude;
    let z: Vec<f64> = b.iter().map(|v| v.norm_squared() - h2).collect();
    let n = b.len() as f64;
    let b_mean = b.iter().sum::<Vector3<f64>>() / n;
    let z_mean = z.iter().sum::<f64>() / n;

    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (bk, zk) in b.iter().zip(&z) {
        let row = 2.0 * (bk - b_mean);
        ata += row * row.transpose();
        aty += row * (zk - z_mean);
    }
    let eig = ata.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(BaselineError::IllConditioned { condition });
    }
    let centered = ata
        .cholesky()
        .ok_or(BaselineError::IllConditioned { condition })?
        .solve(&aty);

    let mut bias = centered;
    let mut current = cost(&b, &z, &bias);
    let mut history = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let bb = bias.norm_squared();
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (bk, zk) in b.iter().zip(&z) {
            // residual r = z - 2 B.b + |b|^2, dr/db = -2 (B - b)
            let r = zk - 2.0 * bk.dot(&bias) + bb;
            let j = -2.0 * (bk - bias);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let Some(chol) = jtj.cholesky() else {
            break;
        };
        let step = -chol.solve(&jtr);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = bias + step * scale;
            let c = cost(&b, &z, &candidate);
            if c < current {
                accepted = Some((candidate, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, c)) = accepted else {
            // no descent left at working precision
            converged = true;
            break;
        };
        let moved = (candidate - bias).norm();
        bias = candidate;
        current = c;
        history.push(c);
        if moved < cfg.step_tolerance * (1.0 + bias.norm()) {
            converged = true;
            break;
        }
    }
    Ok(TwoStepResult {
        bias,
        centered,
        iterations,
        converged,
        cost_history: history,
    })
}
