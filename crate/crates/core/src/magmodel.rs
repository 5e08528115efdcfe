//! Vector and scalar magnetometer measurement models.
//!
//! Units are nanotesla and radians throughout. The vector sensor sees
//! `T (T_si C_n^b e^n + h_hi) + h_vec`; the total-field sensor sees
//! `|T_si C_n^b e^n + h_hi|`. Both sensors share the same hard iron.

use crate::geometry::Dcm;
use nalgebra::{Matrix3, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_4;
use thiserror::Error;

/// External (Earth) field in the navigation frame, nT.
pub type ExternalField = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("scale factor {0} must be positive")]
    NonPositiveScale(f64),
    #[error("misalignment angle {0} rad exceeds pi/4")]
    MisalignmentTooLarge(f64),
    #[error("soft-iron matrix is not positive definite (min eigenvalue {0:e})")]
    SoftIronNotPositiveDefinite(f64),
}

/// Scale factors and non-orthogonality angles, `[kx, ky, kz, alpha, beta, gamma]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleOrtho {
    pub kx: f64,
    pub ky: f64,
    pub kz: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScaleOrtho {
    pub const IDENTITY: ScaleOrtho = ScaleOrtho {
        kx: 1.0,
        ky: 1.0,
        kz: 1.0,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn from_array(v: [f64; 6]) -> Self {
        ScaleOrtho {
            kx: v[0],
            ky: v[1],
            kz: v[2],
            alpha: v[3],
            beta: v[4],
            gamma: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.kx, self.ky, self.kz, self.alpha, self.beta, self.gamma]
    }

    /// The combined scale/non-orthogonality matrix `T`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let (sa, ca) = self.alpha.sin_cos();
        let (sb, cb) = self.beta.sin_cos();
        let (sg, cg) = self.gamma.sin_cos();
        Matrix3::new(self.kx, 0.0, 0.0, sb * cg, self.ky * cb * cg, sg, sa, 0.0, self.kz * ca)
    }

    /// `dT / dp_i` for each of the six entries, in `to_array` order.
    pub fn partials(&self) -> [Matrix3<f64>; 6] {
        let (sa, ca) = self.alpha.sin_cos();
        let (sb, cb) = self.beta.sin_cos();
        let (sg, cg) = self.gamma.sin_cos();
        let mut d = [Matrix3::zeros(); 6];
        d[0][(0, 0)] = 1.0;
        d[1][(1, 1)] = cb * cg;
        d[2][(2, 2)] = ca;
        d[3][(2, 0)] = ca;
        d[3][(2, 2)] = -self.kz * sa;
        d[4][(1, 0)] = cb * cg;
        d[4][(1, 1)] = -self.ky * sb * cg;
        d[5][(1, 0)] = -sb * sg;
        d[5][(1, 1)] = -self.ky * cb * sg;
        d[5][(1, 2)] = cg;
        d
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for k in [self.kx, self.ky, self.kz] {
            if !(k > 0.0) {
                return Err(ModelError::NonPositiveScale(k));
            }
        }
        for a in [self.alpha, self.beta, self.gamma] {
            if !(a.abs() < FRAC_PI_4) {
                return Err(ModelError::MisalignmentTooLarge(a));
            }
        }
        Ok(())
    }
}

impl Default for ScaleOrtho {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// The calibration unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalParams {
    /// Hard iron, body frame, nT.
    pub h_hi: Vector3<f64>,
    /// Vector-sensor bias, nT.
    pub h_vec: Vector3<f64>,
    pub t_vec: ScaleOrtho,
}

impl CalParams {
    pub fn identity() -> Self {
        CalParams {
            h_hi: Vector3::zeros(),
            h_vec: Vector3::zeros(),
            t_vec: ScaleOrtho::IDENTITY,
        }
    }

    pub fn matrix_form(&self) -> Matrix3<f64> {
        self.t_vec.matrix()
    }
}

impl Default for CalParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// Symmetric positive definite soft-iron matrix. Simulation truth only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct SoftIron(Matrix3<f64>);

impl SoftIron {
    pub fn identity() -> Self {
        SoftIron(Matrix3::identity())
    }

    /// Builds `[[a b c] [b d e] [c e f]]`.
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<Self, ModelError> {
        let m = Matrix3::new(a, b, c, b, d, e, c, e, f);
        let min_eig = SymmetricEigen::new(m).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(ModelError::SoftIronNotPositiveDefinite(min_eig));
        }
        Ok(SoftIron(m))
    }

    pub fn unique_terms(&self) -> [f64; 6] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

impl TryFrom<[f64; 6]> for SoftIron {
    type Error = ModelError;
    fn try_from(v: [f64; 6]) -> Result<Self, ModelError> {
        SoftIron::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

impl From<SoftIron> for [f64; 6] {
    fn from(s: SoftIron) -> [f64; 6] {
        s.unique_terms()
    }
}

impl Default for SoftIron {
    fn default() -> Self {
        Self::identity()
    }
}

/// One magnetometer sample: vector components and total field, nT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagMeasurement {
    pub m_vec: Vector3<f64>,
    pub m_scalar: f64,
}

impl MagMeasurement {
    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.m_vec.x, self.m_vec.y, self.m_vec.z, self.m_scalar)
    }

    pub fn is_finite(&self) -> bool {
        self.m_vec.iter().all(|v| v.is_finite()) && self.m_scalar.is_finite()
    }
}

/// True for field magnitudes an Earth-like core field can have.
pub fn is_physical_field(e: &ExternalField) -> bool {
    let n = e.norm();
    n > 1e3 && n < 1e5
}

/// `T_si C_n^b e^n + h_hi`, the distorted field at the sensor in body axes.
pub fn body_field(si: &SoftIron, c_nb: &Dcm, e: &ExternalField, h_hi: &Vector3<f64>) -> Vector3<f64> {
    si.0 * c_nb.rotate(e) + h_hi
}

/// Vector magnetometer prediction `T (T_si C e + h_hi) + h_vec`.
pub fn predict_vector(p: &CalParams, si: &SoftIron, c_nb: &Dcm, e: &ExternalField) -> Vector3<f64> {
    p.matrix_form() * body_field(si, c_nb, e, &p.h_hi) + p.h_vec
}

/// Total-field magnetometer prediction `|T_si C e + h_hi|`.
pub fn predict_scalar(si: &SoftIron, c_nb: &Dcm, e: &ExternalField, h_hi: &Vector3<f64>) -> f64 {
    body_field(si, c_nb, e, h_hi).norm()
}

/// Both channels at once.
pub fn predict(p: &CalParams, si: &SoftIron, c_nb: &Dcm, e: &ExternalField) -> MagMeasurement {
    let b = body_field(si, c_nb, e, &p.h_hi);
    MagMeasurement {
        m_vec: p.matrix_form() * b + p.h_vec,
        m_scalar: b.norm(),
    }
}

/// `T` and its six partial derivatives.
pub fn cal_matrix(p: &CalParams) -> (Matrix3<f64>, [Matrix3<f64>; 6]) {
    (p.t_vec.matrix(), p.t_vec.partials())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dcm_from_rotvec, RotVec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn all_distortions_off() {
        let e = Vector3::new(50000.0, 0.0, 0.0);
        let m = predict_vector(&CalParams::identity(), &SoftIron::identity(), &Dcm::identity(), &e);
        assert_eq!(m, e);
        let mut p = CalParams::identity();
        p.h_hi = Vector3::new(100.0, 200.0, -300.0);
        let m = predict_vector(&p, &SoftIron::identity(), &Dcm::identity(), &e);
        assert_eq!(m, Vector3::new(50100.0, 200.0, -300.0));
    }

    #[test]
    fn table_one_style_parameters() {
        let p = CalParams {
            h_hi: Vector3::new(1000.0, 0.0, 0.0),
            h_vec: Vector3::new(0.0, 1000.0, 0.0),
            t_vec: ScaleOrtho {
                kx: 1.1,
                alpha: 0.01,
                ..ScaleOrtho::IDENTITY
            },
        };
        let e = Vector3::new(50000.0, 0.0, 0.0);
        let m = predict_vector(&p, &SoftIron::identity(), &Dcm::identity(), &e);
        // numpy: T @ (e + h_hi) + h_vec
        assert_relative_eq!(m, Vector3::new(56100.0, 1000.0, 509.99150004249987), epsilon = 1e-9);
    }

    #[test]
    fn scalar_examples() {
        let si = SoftIron::identity();
        let c = Dcm::identity();
        assert_eq!(
            predict_scalar(&si, &c, &Vector3::new(50000.0, 0.0, 0.0), &Vector3::zeros()),
            50000.0
        );
        assert_eq!(
            predict_scalar(&si, &c, &Vector3::zeros(), &Vector3::new(0.0, 3000.0, 4000.0)),
            5000.0
        );
    }

    #[test]
    fn cal_matrix_examples() {
        assert_eq!(ScaleOrtho::IDENTITY.matrix(), Matrix3::identity());
        let t = ScaleOrtho {
            kz: 2.0,
            alpha: PI / 6.0,
            ..ScaleOrtho::IDENTITY
        }
        .matrix();
        assert_relative_eq!(t[(2, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(t[(2, 1)], 0.0);
        assert_relative_eq!(t[(2, 2)], 2.0 * (PI / 6.0).cos(), epsilon = 1e-15);
    }

    #[test]
    fn soft_iron_must_be_positive_definite() {
        assert!(SoftIron::new(1.0, 0.0, 0.0, 1.0, 0.0, 1.0).is_ok());
        assert!(matches!(
            SoftIron::new(1.0, 2.0, 0.0, 1.0, 0.0, 1.0),
            Err(ModelError::SoftIronNotPositiveDefinite(_))
        ));
    }

    #[test]
    fn scale_ortho_validation() {
        assert!(ScaleOrtho::IDENTITY.validate().is_ok());
        let bad = ScaleOrtho {
            ky: 0.0,
            ..ScaleOrtho::IDENTITY
        };
        assert!(bad.validate().is_err());
        let bad = ScaleOrtho {
            gamma: 0.9,
            ..ScaleOrtho::IDENTITY
        };
        assert!(bad.validate().is_err());
    }

    fn arb_scale_ortho() -> impl Strategy<Value = ScaleOrtho> {
        (
            0.7f64..1.3,
            0.7f64..1.3,
            0.7f64..1.3,
            -0.5f64..0.5,
            -0.5f64..0.5,
            -0.5f64..0.5,
        )
            .prop_map(|(a, b, c, d, e, f)| ScaleOrtho::from_array([a, b, c, d, e, f]))
    }

    fn arb_dcm() -> impl Strategy<Value = Dcm> {
        (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0).prop_map(|(x, y, z)| dcm_from_rotvec(&RotVec::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn partials_match_central_differences(t in arb_scale_ortho()) {
            let d = t.partials();
            let h = 1e-6;
            for i in 0..6 {
                let mut up = t.to_array();
                let mut dn = t.to_array();
                up[i] += h;
                dn[i] -= h;
                let fd = (ScaleOrtho::from_array(up).matrix() - ScaleOrtho::from_array(dn).matrix()) / (2.0 * h);
                let scale = d[i].abs().max().max(1e-12);
                prop_assert!((fd - d[i]).abs().max() / scale < 1e-6, "param {i}");
            }
        }

        #[test]
        fn scalar_is_attitude_invariant(c in arb_dcm(), x in -6e4f64..6e4, y in -6e4f64..6e4, z in -6e4f64..6e4) {
            let e = Vector3::new(x, y, z);
            let s = predict_scalar(&SoftIron::identity(), &c, &e, &Vector3::zeros());
            prop_assert!((s - e.norm()).abs() <= 1e-9 * e.norm().max(1.0));
        }

        #[test]
        fn identity_model_is_pure_rotation(c in arb_dcm(), x in -6e4f64..6e4, y in -6e4f64..6e4) {
            let e = Vector3::new(x, y, 1234.0);
            let m = predict(&CalParams::identity(), &SoftIron::identity(), &c, &e);
            prop_assert!((m.m_vec - c.rotate(&e)).abs().max() < 1e-9);
        }

        #[test]
        fn vector_is_linear_in_field(t in arb_scale_ortho(), c in arb_dcm(), a in -2.0f64..2.0) {
            let p = CalParams { h_hi: Vector3::new(300.0, -20.0, 5.0), h_vec: Vector3::new(1.0, 2.0, 3.0), t_vec: t };
            let si = SoftIron::new(1.01, 0.002, 0.0, 0.99, -0.001, 1.0).unwrap();
            let e1 = Vector3::new(20000.0, -3000.0, 41000.0);
            let e2 = Vector3::new(-500.0, 700.0, 100.0);
            // affine: f(e1 + a e2) - f(0) = (f(e1) - f(0)) + a (f(e2) - f(0))
            let f = |e: &Vector3<f64>| predict_vector(&p, &si, &c, e);
            let f0 = f(&Vector3::zeros());
            let lhs = f(&(e1 + a * e2)) - f0;
            let rhs = (f(&e1) - f0) + a * (f(&e2) - f0);
            prop_assert!((lhs - rhs).abs().max() < 1e-7);
        }
    }
}
