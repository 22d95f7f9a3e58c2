use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use super::rotation::{rot6d_to_matrix, Rot6};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub rot6d: Vec<Rot6>,
    pub tau: [f64; 3],
}

/// Per-frame joint rotations (6D) plus root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub fps: f64,
    pub frames: Vec<Frame>,
}

impl Motion {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rot6d.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Invalid("motion has no frames".into()));
        }
        let j = self.joint_count();
        for (h, f) in self.frames.iter().enumerate() {
            if f.rot6d.len() != j {
                return Err(Error::Shape(format!(
                    "frame {h} has {} joints, expected {j}",
                    f.rot6d.len()
                )));
            }
            if f.tau.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("root translation of frame {h}")));
            }
            for r in &f.rot6d {
                let m = rot6d_to_matrix(r)?;
                if (m.determinant() - 1.0).abs() > 1e-6 {
                    return Err(Error::NotOrthonormal((m.determinant() - 1.0).abs()));
                }
            }
        }
        Ok(())
    }

    /// Flatten to an `H x (6J + 3)` state matrix (rotations, then translation).
    pub fn to_state(&self) -> DMatrix<f64> {
        let j = self.joint_count();
        let mut m = DMatrix::zeros(self.len(), 6 * j + 3);
        for (h, f) in self.frames.iter().enumerate() {
            for (k, r) in f.rot6d.iter().enumerate() {
                for c in 0..6 {
                    m[(h, 6 * k + c)] = r[c];
                }
            }
            for c in 0..3 {
                m[(h, 6 * j + c)] = f.tau[c];
            }
        }
        m
    }

    pub fn from_state(state: &DMatrix<f64>, fps: f64) -> Result<Motion> {
        let width = state.ncols();
        if width < 9 || (width - 3) % 6 != 0 {
            return Err(Error::Shape(format!("state width {width} is not 6J + 3")));
        }
        let j = (width - 3) / 6;
        let frames = (0..state.nrows())
            .map(|h| Frame {
                rot6d: (0..j)
                    .map(|k| std::array::from_fn(|c| state[(h, 6 * k + c)]))
                    .collect(),
                tau: std::array::from_fn(|c| state[(h, 6 * j + c)]),
            })
            .collect();
        Ok(Motion { fps, frames })
    }

    /// Replace every rotation with its Gram–Schmidt projection so the motion
    /// satisfies the rotation-validity invariant.
    pub fn orthonormalized(&self) -> Motion {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                rot6d: f
                    .rot6d
                    .iter()
                    .map(|r| {
                        let gs = super::rotation::GramSchmidt::new(r);
                        super::rotation::encode_unchecked(&gs.matrix())
                    })
                    .collect(),
                tau: f.tau,
            })
            .collect();
        Motion {
            fps: self.fps,
            frames,
        }
    }

    pub fn check_compatible(&self, skeleton: &Skeleton) -> Result<()> {
        if self.joint_count() != skeleton.joint_count() {
            return Err(Error::Shape(format!(
                "motion has {} joints, skeleton '{}' has {}",
                self.joint_count(),
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        Ok(())
    }

    pub fn local_rotations(&self, h: usize) -> Result<Vec<Matrix3<f64>>> {
        self.frames[h].rot6d.iter().map(rot6d_to_matrix).collect()
    }
}
