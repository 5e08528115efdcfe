use crate::geometry::{dcm_from_rotvec, rotvec_from_dcm, so3_exp, Dcm, RotVec};
use crate::magmodel::{CalParams, ExternalField, ScaleOrtho};
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::GraphError;

/// Column layout of the state vector for `epochs` time steps:
/// `[h_hi(3), h_vec(3), T^v(6), e^0..e^k (3 each), C^0..C^k (3 each)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    epochs: usize,
}

impl Layout {
    pub const H_HI: usize = 0;
    pub const H_VEC: usize = 3;
    pub const T_VEC: usize = 6;
    pub const PARAMS: usize = 12;

    pub fn new(epochs: usize) -> Self {
        Layout { epochs }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn dim(&self) -> usize {
        Self::PARAMS + 6 * self.epochs
    }

    pub fn field(&self, k: usize) -> usize {
        Self::PARAMS + 3 * k
    }

    pub fn attitude(&self, k: usize) -> usize {
        Self::PARAMS + 3 * self.epochs + 3 * k
    }

    pub fn is_attitude_column(&self, col: usize) -> bool {
        col >= self.attitude(0) && col < self.dim()
    }
}

/// Optimization state: calibration parameters, per-epoch navigation-frame
/// field and per-epoch attitude `C_n^{bk}` stored as a rotation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub cal: CalParams,
    pub fields: Vec<ExternalField>,
    pub attitudes: Vec<RotVec>,
}

impl StateVector {
    pub fn new(cal: CalParams, fields: Vec<ExternalField>, attitudes: Vec<Dcm>) -> Result<Self, GraphError> {
        if fields.len() != attitudes.len() {
            return Err(GraphError::DimensionMismatch {
                expected: fields.len(),
                got: attitudes.len(),
            });
        }
        Ok(StateVector {
            cal,
            fields,
            attitudes: attitudes.iter().map(rotvec_from_dcm).collect(),
        })
    }

    pub fn epochs(&self) -> usize {
        self.fields.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.epochs())
    }

    pub fn dcm(&self, k: usize) -> Dcm {
        dcm_from_rotvec(&self.attitudes[k])
    }

    pub fn dcms(&self) -> Vec<Dcm> {
        self.attitudes.iter().map(dcm_from_rotvec).collect()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut x = DVector::zeros(layout.dim());
        x.fixed_rows_mut::<3>(Layout::H_HI).copy_from(&self.cal.h_hi);
        x.fixed_rows_mut::<3>(Layout::H_VEC).copy_from(&self.cal.h_vec);
        for (i, v) in self.cal.t_vec.to_array().iter().enumerate() {
            x[Layout::T_VEC + i] = *v;
        }
        for k in 0..self.epochs() {
            x.fixed_rows_mut::<3>(layout.field(k)).copy_from(&self.fields[k]);
            x.fixed_rows_mut::<3>(layout.attitude(k))
                .copy_from(&self.attitudes[k].0);
        }
        x
    }

    pub fn from_flat(layout: Layout, x: &DVector<f64>) -> Result<Self, GraphError> {
        if x.len() != layout.dim() {
            return Err(GraphError::DimensionMismatch {
                expected: layout.dim(),
                got: x.len(),
            });
        }
        let v3 = |o: usize| Vector3::new(x[o], x[o + 1], x[o + 2]);
        let mut t = [0.0; 6];
        for (i, v) in t.iter_mut().enumerate() {
            *v = x[Layout::T_VEC + i];
        }
        Ok(StateVector {
            cal: CalParams {
                h_hi: v3(Layout::H_HI),
                h_vec: v3(Layout::H_VEC),
                t_vec: ScaleOrtho::from_array(t),
            },
            fields: (0..layout.epochs()).map(|k| v3(layout.field(k))).collect(),
            attitudes: (0..layout.epochs()).map(|k| RotVec(v3(layout.attitude(k)))).collect(),
        })
    }

    /// Applies a tangent-space step: additive on parameters and fields,
    /// `C <- C exp([d]x)` on attitudes.
    pub fn retract(&self, delta: &DVector<f64>) -> StateVector {
        let layout = self.layout();
        debug_assert_eq!(delta.len(), layout.dim());
        let d3 = |o: usize| Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
        let mut t = self.cal.t_vec.to_array();
        for (i, v) in t.iter_mut().enumerate() {
            *v += delta[Layout::T_VEC + i];
        }
        StateVector {
            cal: CalParams {
                h_hi: self.cal.h_hi + d3(Layout::H_HI),
                h_vec: self.cal.h_vec + d3(Layout::H_VEC),
                t_vec: ScaleOrtho::from_array(t),
            },
            fields: (0..layout.epochs())
                .map(|k| self.fields[k] + d3(layout.field(k)))
                .collect(),
            attitudes: (0..layout.epochs())
                .map(|k| {
                    let c = self.dcm(k);
                    let updated = Dcm::from_matrix_unchecked(c.matrix() * so3_exp(&d3(layout.attitude(k))));
                    rotvec_from_dcm(&updated)
                })
                .collect(),
        }
    }
}
