use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{fk_pose, Skeleton};

pub const GRAVITY: f64 = 9.81;

/// PD gains, actuator limits and failure thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub kp: f64,
    pub kd: f64,
    pub kp_root: f64,
    pub kd_root: f64,
    /// Joint torque clamp (N m).
    pub torque_limit: f64,
    /// Root residual force clamp (N).
    pub residual_limit: f64,
    /// Added rotor inertia on every joint (kg m^2).
    pub armature: f64,
    /// Passive viscous joint damping (N m s).
    pub passive_damping: f64,
    /// Rotation magnitude beyond which a joint meets a soft stop (rad).
    pub angle_limit: f64,
    pub limit_stiffness: f64,
    pub base_mass: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangent_stiffness: f64,
    pub tangent_damping: f64,
    pub friction: f64,
    pub dt: f64,
    pub substeps: usize,
    pub fail_height: f64,
    pub fail_angle: f64,
    /// Fraction of frames that must succeed for a sequence to count.
    pub success_fraction: f64,
    pub penetration_tolerance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            kp: 10000.0,
            kd: 200.0,
            kp_root: 1000.0,
            kd_root: 100.0,
            torque_limit: 300.0,
            residual_limit: 200.0,
            armature: 0.5,
            passive_damping: 0.0,
            angle_limit: 2.8,
            limit_stiffness: 500.0,
            base_mass: 70.0,
            contact_stiffness: 1e5,
            contact_damping: 2000.0,
            tangent_stiffness: 2e4,
            tangent_damping: 500.0,
            friction: 0.9,
            dt: 1.0 / 300.0,
            substeps: 10,
            fail_height: 0.3,
            fail_angle: 1.0,
            success_fraction: 0.95,
            penetration_tolerance: 0.02,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("kp", self.kp),
            ("kd", self.kd),
            ("kp_root", self.kp_root),
            ("kd_root", self.kd_root),
            ("torque_limit", self.torque_limit),
            ("residual_limit", self.residual_limit),
            ("passive_damping", self.passive_damping),
            ("limit_stiffness", self.limit_stiffness),
            ("contact_damping", self.contact_damping),
            ("tangent_damping", self.tangent_damping),
            ("friction", self.friction),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "tracker.{name} = {v} must be finite and non-negative"
                )));
            }
        }
        let positive = [
            ("armature", self.armature),
            ("base_mass", self.base_mass),
            ("contact_stiffness", self.contact_stiffness),
            ("tangent_stiffness", self.tangent_stiffness),
            ("dt", self.dt),
            ("fail_height", self.fail_height),
            ("fail_angle", self.fail_angle),
            ("angle_limit", self.angle_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "tracker.{name} = {v} must be positive"
                )));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Invalid("tracker.substeps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.success_fraction) {
            return Err(Error::Invalid(
                "tracker.success_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Simulated body: scaled skeleton with per-bone masses and per-joint
/// scalar inertias.
#[derive(Clone, Debug)]
pub struct Character {
    pub skeleton: Skeleton,
    /// Mass of the bone ending at each joint (0 for the root).
    pub bone_mass: Vec<f64>,
    pub total_mass: f64,
    /// Scalar inertia of each joint's rotational degrees of freedom; entry 0
    /// is the root orientation.
    pub inertia: Vec<f64>,
    /// Joints whose world positions touch the ground.
    pub contact_points: Vec<usize>,
    pub config: TrackerConfig,
}

impl Character {
    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }
}

pub fn build_character(
    skeleton: &Skeleton,
    beta: &[f64],
    config: &TrackerConfig,
) -> Result<Character> {
    config.validate()?;
    if beta.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Invalid("shape scales must be positive".into()));
    }
    let skel = skeleton.with_scales(beta)?;
    let j = skel.joint_count();
    let lengths: Vec<f64> = (0..j)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                skel.scaled_offset(k).norm()
            }
        })
        .collect();
    let total_len: f64 = lengths.iter().sum();
    let mean_beta = beta.iter().sum::<f64>() / beta.len() as f64;
    let total_mass = config.base_mass * mean_beta;
    let bone_mass: Vec<f64> = if total_len > 0.0 {
        lengths.iter().map(|l| total_mass * l / total_len).collect()
    } else {
        let mut m = vec![0.0; j];
        m[0] = total_mass;
        m
    };

    // inertia about each joint of every bone it carries, bones as point
    // masses at their midpoints in the rest pose
    let rest = fk_pose(&skel, &vec![Matrix3::identity(); j], Vector3::zeros());
    let mid = |b: usize| -> Vector3<f64> {
        let p = skel.parents[b].expect("non-root bone");
        0.5 * (rest.positions[p] + rest.positions[b])
    };
    let inertia = (0..j)
        .map(|k| {
            let carried: f64 = (1..j)
                .filter(|&b| skel.parents[b].is_some_and(|p| skel.is_descendant(p, k)))
                .map(|b| bone_mass[b] * (mid(b) - rest.positions[k]).norm_squared())
                .sum();
            carried + config.armature
        })
        .collect();
    let mut contact_points = skel.feet.clone();
    contact_points.push(0);
    Ok(Character {
        skeleton: skel,
        bone_mass,
        total_mass,
        inertia,
        contact_points,
        config: config.clone(),
    })
}
