//! Rotation representations: direction cosine matrices, rotation vectors and
//! roll/pitch/yaw Euler angles.
//!
//! Conventions:
//!
//! * A [`Dcm`] `C_a^b` maps a-frame column vectors into the b-frame.
//! * Euler angles describe the navigation-to-body DCM of a NED platform as
//!   the frame rotation sequence `R1(roll) R2(pitch) R3(yaw)`.
//! * A [`RotVec`] `v` encodes the frame rotation `C = exp(-[v]x)`. With this
//!   sign, `dcm_from_rotvec([0, 0, psi])` equals `dcm_from_euler(0, 0, psi)`
//!   and the rotation vector of a body-frame increment `C^{bk} C^{bk-1 T}`
//!   equals the angle increment a strapdown gyro reports.
//!
//! The group exponential and logarithm ([`so3_exp`], [`so3_log`]) use the
//! usual active sign (`exp([w]x)`); the optimizer perturbs attitudes through
//! them as `C <- C * so3_exp(delta)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Angles below this use second-order series for exp/log.
const SMALL_ANGLE: f64 = 1e-7;
/// Pitch closer than this to +-pi/2 is treated as gimbal lock.
const GIMBAL_LOCK_MARGIN: f64 = 1e-6;
/// Rotation angles this close to pi are treated as exact half turns.
const HALF_TURN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("gimbal lock: pitch {pitch} rad is within {GIMBAL_LOCK_MARGIN} rad of +-pi/2")]
    GimbalLock { pitch: f64 },
    #[error("matrix is not a proper rotation (orthonormality error {0:e})")]
    NotARotation(f64),
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a x b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Group exponential `exp([w]x)`.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2.sqrt() < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// Group logarithm, inverse of [`so3_exp`]. Returns a vector with norm in `[0, pi]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let anti = vee(&(r - r.transpose())) * 0.5; // sin(theta) * axis
    let sin_t = anti.norm();
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return anti * (1.0 + theta * theta / 6.0);
    }
    if theta < PI - 1e-3 {
        return anti * (theta / sin_t);
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part, uu^T = (sym(R) - cos I) / (1 - cos).
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos_t) / (1.0 - cos_t);
    let mut best = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = outer.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3) at `w`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of the right Jacobian of SO(3) at `w`.
pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Direction cosine matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dcm(Matrix3<f64>);

impl Dcm {
    pub fn identity() -> Self {
        Dcm(Matrix3::identity())
    }

    /// Wraps a matrix after checking `C^T C = I` and `det C = +1` within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = (m.determinant() - 1.0).abs();
        let err = ortho.max(det);
        if err > 1e-9 || !err.is_finite() {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(Dcm(m))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Dcm(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Dcm {
        Dcm(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Re-orthonormalizes through the log/exp round trip.
    pub fn renormalized(&self) -> Dcm {
        Dcm(so3_exp(&so3_log(&self.0)))
    }
}

impl std::ops::Mul for Dcm {
    type Output = Dcm;
    fn mul(self, rhs: Dcm) -> Dcm {
        Dcm(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Dcm {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rotation vector (axis times angle, radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RotVec(pub Vector3<f64>);

impl RotVec {
    pub fn zeros() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotVec(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// Maps the angle into `[0, pi]`; at exactly pi the first nonzero axis
    /// component is made positive.
    pub fn canonical(&self) -> RotVec {
        let theta = self.0.norm();
        if theta < PI {
            return *self;
        }
        let axis = self.0 / theta;
        let wrapped = theta.rem_euclid(2.0 * PI);
        if wrapped == PI {
            RotVec(canonical_half_turn(&(axis * PI)))
        } else if wrapped > PI {
            RotVec(-axis * (2.0 * PI - wrapped))
        } else {
            RotVec(axis * wrapped)
        }
    }
}

fn canonical_half_turn(v: &Vector3<f64>) -> Vector3<f64> {
    match v.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -v,
        _ => *v,
    }
}

/// Roll, pitch, yaw (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerRpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerRpy {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        EulerRpy { roll, pitch, yaw }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.roll, self.pitch, self.yaw)
    }
}

/// Navigation-to-body DCM `C_n^b = R1(roll) R2(pitch) R3(yaw)`.
pub fn dcm_from_euler(e: &EulerRpy) -> Dcm {
    let (sr, cr) = e.roll.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sy, cy) = e.yaw.sin_cos();
    Dcm(Matrix3::new(
        cp * cy,
        cp * sy,
        -sp,
        sr * sp * cy - cr * sy,
        sr * sp * sy + cr * cy,
        sr * cp,
        cr * sp * cy + sr * sy,
        cr * sp * sy - sr * cy,
        cr * cp,
    ))
}

/// Inverse of [`dcm_from_euler`].
pub fn euler_from_dcm(c: &Dcm) -> Result<EulerRpy, GeometryError> {
    let m = c.matrix();
    let pitch = (-m[(0, 2)]).clamp(-1.0, 1.0).asin();
    if FRAC_PI_2 - pitch.abs() < GIMBAL_LOCK_MARGIN {
        return Err(GeometryError::GimbalLock { pitch });
    }
    let roll = m[(1, 2)].atan2(m[(2, 2)]);
    let yaw = m[(0, 1)].atan2(m[(0, 0)]);
    Ok(EulerRpy { roll, pitch, yaw })
}

/// `C = exp(-[v]x)`.
pub fn dcm_from_rotvec(v: &RotVec) -> Dcm {
    Dcm(so3_exp(&(-v.0)))
}

/// Canonical rotation vector of `c`, inverse of [`dcm_from_rotvec`].
pub fn rotvec_from_dcm(c: &Dcm) -> RotVec {
    let v = -so3_log(c.matrix());
    // a numerical half turn gets the deterministic axis sign
    if PI - v.norm() < HALF_TURN_TOL {
        return RotVec(canonical_half_turn(&(v * (PI / v.norm()))));
    }
    RotVec(v)
}

/// Rotation vector of the body-frame increment `c_curr * c_prev^T`.
pub fn relative_rotvec(c_prev: &Dcm, c_curr: &Dcm) -> RotVec {
    rotvec_from_dcm(&Dcm(c_curr.0 * c_prev.0.transpose()))
}
