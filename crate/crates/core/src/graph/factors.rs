use crate::geometry::{right_jacobian_inv, skew, so3_log, Dcm};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};

use super::{GraphError, Layout, MagModelForm, ParamBlock, StateVector};

/// Below this body-field magnitude (nT) the scalar derivative is undefined.
const MIN_FIELD_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    FieldChange,
    Gyro,
    Attitude,
    Magnetometer,
    Prior,
}

/// A factor node with its square-root information matrix.
#[derive(Debug, Clone)]
pub enum Factor {
    /// Zero-mean change of the external field from epoch `step - 1` to `step`.
    FieldChange { step: usize, sqrt_info: DMatrix<f64> },
    /// Measured body-frame increment from `step - 1` to `step`, as a DCM.
    Gyro {
        step: usize,
        measured: Dcm,
        sqrt_info: DMatrix<f64>,
    },
    /// Measured attitude `C_n^b` at `epoch`.
    Attitude {
        epoch: usize,
        measured: Dcm,
        sqrt_info: DMatrix<f64>,
    },
    /// `[m_x, m_y, m_z, m_scalar]` at `epoch`.
    Magnetometer {
        epoch: usize,
        measured: Vector4<f64>,
        sqrt_info: DMatrix<f64>,
    },
    Prior {
        block: ParamBlock,
        mean: DVector<f64>,
        sqrt_info: DMatrix<f64>,
    },
}

/// Whitened residual and Jacobian of one factor over its connected columns.
pub(crate) struct Linearized {
    pub cols: Vec<usize>,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

fn range3(start: usize) -> impl Iterator<Item = usize> {
    start..start + 3
}

fn put3(j: &mut DMatrix<f64>, row: usize, col: usize, m: &Matrix3<f64>) {
    j.fixed_view_mut::<3, 3>(row, col).copy_from(m);
}

fn rotvec_residual(r: &Matrix3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    // residual is the frame-rotation vector, -Log(r); also return Log(r)
    let phi = so3_log(r);
    (-phi, phi)
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::FieldChange { .. } => FactorKind::FieldChange,
            Factor::Gyro { .. } => FactorKind::Gyro,
            Factor::Attitude { .. } => FactorKind::Attitude,
            Factor::Magnetometer { .. } => FactorKind::Magnetometer,
            Factor::Prior { .. } => FactorKind::Prior,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Magnetometer { .. } => 4,
            Factor::Prior { block, .. } => block.size(),
            _ => 3,
        }
    }

    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        match self {
            Factor::FieldChange { sqrt_info, .. }
            | Factor::Gyro { sqrt_info, .. }
            | Factor::Attitude { sqrt_info, .. }
            | Factor::Magnetometer { sqrt_info, .. }
            | Factor::Prior { sqrt_info, .. } => sqrt_info,
        }
    }

    /// State columns this factor touches, in Jacobian column order.
    pub fn columns(&self, layout: &Layout) -> Vec<usize> {
        match self {
            Factor::FieldChange { step, .. } => range3(layout.field(step - 1))
                .chain(range3(layout.field(*step)))
                .collect(),
            Factor::Gyro { step, .. } => range3(layout.attitude(step - 1))
                .chain(range3(layout.attitude(*step)))
                .collect(),
            Factor::Attitude { epoch, .. } => range3(layout.attitude(*epoch)).collect(),
            Factor::Magnetometer { epoch, .. } => (0..Layout::PARAMS)
                .chain(range3(layout.field(*epoch)))
                .chain(range3(layout.attitude(*epoch)))
                .collect(),
            Factor::Prior { block, .. } => (block.offset()..block.offset() + block.size()).collect(),
        }
    }

    pub(crate) fn residual(
        &self,
        state: &StateVector,
        dcms: &[Dcm],
        form: MagModelForm,
    ) -> Result<DVector<f64>, GraphError> {
        Ok(self.evaluate(state, dcms, form, false)?.0)
    }

    pub(crate) fn linearize(
        &self,
        state: &StateVector,
        dcms: &[Dcm],
        form: MagModelForm,
    ) -> Result<Linearized, GraphError> {
        let (r, j) = self.evaluate(state, dcms, form, true)?;
        let w = self.sqrt_info();
        Ok(Linearized {
            cols: self.columns(&state.layout()),
            residual: w * r,
            jacobian: w * j.expect("jacobian requested"),
        })
    }

    /// Unwhitened residual `z - h` and, optionally, `dh/dx` over [`Self::columns`].
    fn evaluate(
        &self,
        state: &StateVector,
        dcms: &[Dcm],
        form: MagModelForm,
        want_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>), GraphError> {
        match self {
            Factor::FieldChange { step, .. } => {
                let r = -(state.fields[*step] - state.fields[step - 1]);
                let j = want_jacobian.then(|| {
                    let mut j = DMatrix::zeros(3, 6);
                    put3(&mut j, 0, 0, &-Matrix3::identity());
                    put3(&mut j, 0, 3, &Matrix3::identity());
                    j
                });
                Ok((DVector::from_column_slice(r.as_slice()), j))
            }
            Factor::Gyro { step, measured, .. } => {
                let prev = dcms[step - 1].matrix();
                let curr = dcms[*step].matrix();
                // measured increment composed with the inverse predicted increment
                let b = measured.matrix() * prev * curr.transpose();
                let (r, phi) = rotvec_residual(&b);
                let j = want_jacobian.then(|| {
                    let a = right_jacobian_inv(&phi) * curr;
                    let mut j = DMatrix::zeros(3, 6);
                    put3(&mut j, 0, 0, &a);
                    put3(&mut j, 0, 3, &-a);
                    j
                });
                Ok((DVector::from_column_slice(r.as_slice()), j))
            }
            Factor::Attitude { epoch, measured, .. } => {
                let c = dcms[*epoch].matrix();
                let (r, phi) = rotvec_residual(&(measured.matrix() * c.transpose()));
                let j = want_jacobian.then(|| {
                    let mut j = DMatrix::zeros(3, 3);
                    put3(&mut j, 0, 0, &-(right_jacobian_inv(&phi) * c));
                    j
                });
                Ok((DVector::from_column_slice(r.as_slice()), j))
            }
            Factor::Magnetometer { epoch, measured, .. } => {
                magnetometer(state, dcms, *epoch, measured, form, want_jacobian)
            }
            Factor::Prior { block, mean, .. } => {
                let r = mean - DVector::from_vec(state_block(state, *block));
                let j = want_jacobian.then(|| DMatrix::identity(block.size(), block.size()));
                Ok((r, j))
            }
        }
    }
}

fn state_block(state: &StateVector, block: ParamBlock) -> Vec<f64> {
    match block {
        ParamBlock::HardIron => state.cal.h_hi.iter().copied().collect(),
        ParamBlock::VectorBias => state.cal.h_vec.iter().copied().collect(),
        ParamBlock::ScaleOrtho => state.cal.t_vec.to_array().to_vec(),
    }
}

fn magnetometer(
    state: &StateVector,
    dcms: &[Dcm],
    epoch: usize,
    measured: &Vector4<f64>,
    form: MagModelForm,
    want_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>), GraphError> {
    let cal = &state.cal;
    let c = dcms[epoch].matrix();
    let e = &state.fields[epoch];
    let t = cal.t_vec.matrix();
    let ce = c * e;

    // `inner` is the vector whose norm the scalar sensor sees.
    let (vector, inner) = match form {
        MagModelForm::ScaledHardIron => {
            let b = ce + cal.h_hi;
            (t * b + cal.h_vec, b)
        }
        MagModelForm::UnscaledHardIron => {
            let w = cal.h_hi + t * ce;
            (w + cal.h_vec, w)
        }
    };
    let norm = inner.norm();
    if !(norm >= MIN_FIELD_NORM) {
        return Err(GraphError::DegenerateField { epoch, magnitude: norm });
    }
    let pred = Vector4::new(vector.x, vector.y, vector.z, norm);
    let r = DVector::from_column_slice((measured - pred).as_slice());
    if !want_jacobian {
        return Ok((r, None));
    }

    // columns: h_hi(0..3) h_vec(3..6) T^v(6..12) e(12..15) dtheta(15..18)
    let u = inner / norm;
    let partials = cal.t_vec.partials();
    let d_ce_dtheta = -c * skew(e);
    let mut j = DMatrix::zeros(4, 18);
    match form {
        MagModelForm::ScaledHardIron => {
            let b = inner;
            put3(&mut j, 0, 0, &t);
            put3(&mut j, 0, 3, &Matrix3::identity());
            for (i, dt) in partials.iter().enumerate() {
                j.fixed_view_mut::<3, 1>(0, 6 + i).copy_from(&(dt * b));
            }
            put3(&mut j, 0, 12, &(t * c));
            put3(&mut j, 0, 15, &(t * d_ce_dtheta));

            j.fixed_view_mut::<1, 3>(3, 0).copy_from(&u.transpose());
            j.fixed_view_mut::<1, 3>(3, 12).copy_from(&(u.transpose() * c));
            j.fixed_view_mut::<1, 3>(3, 15)
                .copy_from(&(u.transpose() * d_ce_dtheta));
        }
        MagModelForm::UnscaledHardIron => {
            put3(&mut j, 0, 0, &Matrix3::identity());
            put3(&mut j, 0, 3, &Matrix3::identity());
            for (i, dt) in partials.iter().enumerate() {
                let col = dt * ce;
                j.fixed_view_mut::<3, 1>(0, 6 + i).copy_from(&col);
                j[(3, 6 + i)] = u.dot(&col);
            }
            put3(&mut j, 0, 12, &(t * c));
            put3(&mut j, 0, 15, &(t * d_ce_dtheta));

            j.fixed_view_mut::<1, 3>(3, 0).copy_from(&u.transpose());
            j.fixed_view_mut::<1, 3>(3, 12).copy_from(&(u.transpose() * t * c));
            j.fixed_view_mut::<1, 3>(3, 15)
                .copy_from(&(u.transpose() * t * d_ce_dtheta));
        }
    }
    Ok((r, Some(j)))
}
