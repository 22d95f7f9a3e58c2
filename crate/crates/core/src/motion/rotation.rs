//! Continuous 6D rotation encoding and the small SO(3) toolbox the rest of
//! the crate needs (log/exp maps, geodesic angle).
//!
//! A 6D vector is the first two columns of the rotation matrix stacked as
//! `(c0.x, c0.y, c0.z, c1.x, c1.y, c1.z)`. Decoding runs Gram–Schmidt on the
//! two columns and completes the frame with a cross product.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub type Rot6 = [f64; 6];

pub const IDENTITY_6D: Rot6 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

const DEGENERATE_NORM: f64 = 1e-8;
const ORTHONORMAL_TOL: f64 = 1e-6;

/// Decode a 6D rotation. Fails on a near-zero first column.
pub fn rot6d_to_matrix(r6: &Rot6) -> Result<Matrix3<f64>> {
    if r6.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("6D rotation".into()));
    }
    let a1 = Vector3::new(r6[0], r6[1], r6[2]);
    let n1 = a1.norm();
    if n1 <= DEGENERATE_NORM {
        return Err(Error::DegenerateRotation(n1));
    }
    let a2 = Vector3::new(r6[3], r6[4], r6[5]);
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let n2 = u.norm();
    if n2 <= DEGENERATE_NORM {
        return Err(Error::DegenerateRotation(n2));
    }
    let b2 = u / n2;
    Ok(Matrix3::from_columns(&[b1, b2, b1.cross(&b2)]))
}

/// Encode a rotation matrix as its first two columns.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Result<Rot6> {
    let residual = orthonormality_residual(r);
    if !(residual <= ORTHONORMAL_TOL) || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal(residual));
    }
    Ok(encode_unchecked(r))
}

pub(crate) fn encode_unchecked(r: &Matrix3<f64>) -> Rot6 {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Intermediate Gram–Schmidt quantities, kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct GramSchmidt {
    pub a2: Vector3<f64>,
    pub n1: f64,
    pub n2: f64,
    pub b1: Vector3<f64>,
    pub b2: Vector3<f64>,
    pub b3: Vector3<f64>,
}

impl GramSchmidt {
    /// Total decode used inside differentiable code paths: norms are floored
    /// instead of failing so that a training step never aborts mid-graph.
    pub fn new(r6: &[f64]) -> Self {
        let a1 = Vector3::new(r6[0], r6[1], r6[2]);
        let a2 = Vector3::new(r6[3], r6[4], r6[5]);
        let n1 = a1.norm().max(DEGENERATE_NORM);
        let b1 = a1 / n1;
        let u = a2 - b1 * b1.dot(&a2);
        let n2 = u.norm().max(DEGENERATE_NORM);
        let b2 = u / n2;
        GramSchmidt {
            a2,
            n1,
            n2,
            b1,
            b2,
            b3: b1.cross(&b2),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.b1, self.b2, self.b3])
    }

    /// Vector-Jacobian product: gradient wrt the matrix -> gradient wrt the 6 inputs.
    pub fn backward(&self, g: &Matrix3<f64>) -> [f64; 6] {
        let gb3: Vector3<f64> = g.column(2).into();
        let mut gb1: Vector3<f64> = g.column(0).into();
        let mut gb2: Vector3<f64> = g.column(1).into();
        // b3 = b1 x b2
        gb1 += self.b2.cross(&gb3);
        gb2 += gb3.cross(&self.b1);
        // b2 = u / |u|
        let gu = (gb2 - self.b2 * self.b2.dot(&gb2)) / self.n2;
        // u = a2 - (b1 . a2) b1
        let proj = self.b1.dot(&self.a2);
        let ga2 = gu - self.b1 * self.b1.dot(&gu);
        gb1 -= gu * proj + self.a2 * self.b1.dot(&gu);
        // b1 = a1 / |a1|
        let ga1 = (gb1 - self.b1 * self.b1.dot(&gb1)) / self.n1;
        [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
    }
}

/// Axis-angle vector of a rotation matrix (the SO(3) log map).
///
/// Robust to round-off in nearly orthonormal inputs.
pub fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    if angle < 1e-6 {
        return skew;
    }
    if std::f64::consts::PI - angle > 1e-2 {
        return skew * (angle / angle.sin());
    }
    // near a half turn: axis from the symmetric part
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let k = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let mut axis = b.column(k).into_owned();
    if axis.norm() < 1e-12 {
        return Vector3::zeros();
    }
    axis.normalize_mut();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

pub fn exp_map(w: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*w).matrix()
}

pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Geodesic distance between two rotations, in radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Re-orthonormalize a (possibly drifted) matrix through the 6D decode.
pub fn project_to_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    GramSchmidt::new(&encode_unchecked(r)).matrix()
}
