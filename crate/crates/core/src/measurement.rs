//! Time-indexed sensor measurements consumed by the estimators.

use crate::geometry::{EulerRpy, RotVec};
use crate::magmodel::MagMeasurement;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Measurements at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    /// Time, s.
    pub t: f64,
    pub mag: MagMeasurement,
    /// Body-frame angle increment since the previous epoch, rad. Ignored at epoch 0.
    pub gyro: RotVec,
    pub rpy: EulerRpy,
}

/// Noise covariances attached to every measurement of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    /// `[m_x, m_y, m_z, m_scalar]` covariance, nT^2.
    pub mag: Matrix4<f64>,
    /// Per-step gyro increment covariance, rad^2.
    pub gyro: Matrix3<f64>,
    /// Attitude covariance on the rotation-vector residual, rad^2.
    pub attitude: Matrix3<f64>,
}

impl MeasurementNoise {
    pub fn from_sigmas(sigma_vec: f64, sigma_scalar: f64, sigma_gyro: f64, sigma_attitude: f64) -> Self {
        let v = sigma_vec * sigma_vec;
        MeasurementNoise {
            mag: Matrix4::from_diagonal(&nalgebra::Vector4::new(v, v, v, sigma_scalar * sigma_scalar)),
            gyro: Matrix3::identity() * (sigma_gyro * sigma_gyro),
            attitude: Matrix3::identity() * (sigma_attitude * sigma_attitude),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    /// Sample interval, s.
    pub dt: f64,
    pub epochs: Vec<Epoch>,
    pub noise: MeasurementNoise,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Number of transitions `k` (epochs minus one).
    pub fn steps(&self) -> usize {
        self.epochs.len().saturating_sub(1)
    }

    pub fn vector_samples(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.epochs.iter().map(|e| e.mag.m_vec)
    }

    pub fn scalar_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.epochs.iter().map(|e| e.mag.m_scalar)
    }
}
