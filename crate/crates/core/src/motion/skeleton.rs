use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic tree with per-limb bone scales.
///
/// Joint `j`'s rest offset is expressed in its parent's frame; the root's
/// offset is ignored (the root sits at the motion's translation). Each
/// non-root bone belongs to a limb group whose scale factor multiplies the
/// offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
    pub limb_of: Vec<usize>,
    pub feet: Vec<usize>,
    pub scales: Vec<f64>,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn limb_count(&self) -> usize {
        self.scales.len()
    }

    /// Width of a per-frame motion state vector: 6D per joint plus root translation.
    pub fn state_dim(&self) -> usize {
        6 * self.joint_count() + 3
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::Invalid("skeleton has no joints".into()));
        }
        if self.offsets.len() != j || self.limb_of.len() != j {
            return Err(Error::Shape(format!(
                "skeleton '{}': {} parents, {} offsets, {} limb tags",
                self.name,
                j,
                self.offsets.len(),
                self.limb_of.len()
            )));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || self.parents[0].is_some() {
            return Err(Error::Invalid(format!(
                "skeleton '{}' must have exactly one root at index 0",
                self.name
            )));
        }
        for (idx, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= idx {
                    return Err(Error::Invalid(format!(
                        "joint {idx} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        if let Some(bad) = self.limb_of.iter().find(|&&l| l >= self.limb_count()) {
            return Err(Error::Invalid(format!("limb index {bad} out of range")));
        }
        if let Some(bad) = self.feet.iter().find(|&&f| f >= j) {
            return Err(Error::Invalid(format!("foot joint {bad} out of range")));
        }
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid("bone scales must be positive".into()));
        }
        Ok(())
    }

    pub fn with_scales(&self, scales: &[f64]) -> Result<Skeleton> {
        if scales.len() != self.limb_count() {
            return Err(Error::Shape(format!(
                "expected {} bone scales, got {}",
                self.limb_count(),
                scales.len()
            )));
        }
        let out = Skeleton {
            scales: scales.to_vec(),
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    pub fn scaled_offset(&self, j: usize) -> Vector3<f64> {
        let o = self.offsets[j];
        Vector3::new(o[0], o[1], o[2]) * self.scales[self.limb_of[j]]
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    /// True when `d` lies in the subtree rooted at `a` (including `a`).
    pub fn is_descendant(&self, d: usize, a: usize) -> bool {
        let mut cur = Some(d);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.parents[c];
        }
        false
    }
}
