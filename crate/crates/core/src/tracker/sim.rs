use nalgebra::{Matrix3, Vector2, Vector3};

use super::character::{Character, GRAVITY};
use crate::error::{Error, Result};
use crate::motion::rotation::{exp_map, log_map, matrix_to_rot6d};
use crate::motion::{fk_pose, Frame, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct ContactState {
    /// Sticking point of the tangential spring while in contact.
    pub anchor: Option<Vector2<f64>>,
    pub normal_force: f64,
    pub penetration: f64,
}

/// Generalized coordinates and velocities of the character.
///
/// `omega[k]` is joint `k`'s angular velocity expressed in its parent's frame
/// (world frame for the root).
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub locals: Vec<Matrix3<f64>>,
    pub tau: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub omega: Vec<Vector3<f64>>,
    pub contacts: Vec<ContactState>,
    pub time: f64,
}

/// Target of the controller: local rotations plus root translation.
#[derive(Clone, Debug)]
pub struct RefPose {
    pub locals: Vec<Matrix3<f64>>,
    pub tau: Vector3<f64>,
}

impl RefPose {
    /// Decode a frame, orthonormalizing drifted 6D channels.
    pub fn from_frame(frame: &Frame) -> RefPose {
        let locals = frame
            .rot6d
            .iter()
            .map(|r| crate::motion::rotation::GramSchmidt::new(r).matrix())
            .collect();
        RefPose {
            locals,
            tau: Vector3::from(frame.tau),
        }
    }
}

/// Per-joint torques (parent frame) and a root residual force (world).
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub torques: Vec<Vector3<f64>>,
    pub residual: Vector3<f64>,
}

impl Action {
    pub fn zero(joints: usize) -> Action {
        Action {
            torques: vec![Vector3::zeros(); joints],
            residual: Vector3::zeros(),
        }
    }
}

impl SimState {
    /// At rest in the pose of `frame`.
    pub fn from_frame(character: &Character, frame: &Frame) -> Result<SimState> {
        let j = character.joint_count();
        if frame.rot6d.len() != j {
            return Err(Error::Shape(format!(
                "frame has {} joints, character {j}",
                frame.rot6d.len()
            )));
        }
        let r = RefPose::from_frame(frame);
        Ok(SimState {
            locals: r.locals,
            tau: r.tau,
            velocity: Vector3::zeros(),
            omega: vec![Vector3::zeros(); j],
            contacts: vec![
                ContactState {
                    anchor: None,
                    normal_force: 0.0,
                    penetration: 0.0,
                };
                character.contact_points.len()
            ],
            time: 0.0,
        })
    }

    pub fn pose(&self, character: &Character) -> Pose {
        fk_pose(&character.skeleton, &self.locals, self.tau)
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            rot6d: self
                .locals
                .iter()
                .map(|r| {
                    matrix_to_rot6d(r)
                        .unwrap_or_else(|_| crate::motion::rotation::encode_unchecked(r))
                })
                .collect(),
            tau: self.tau.into(),
        }
    }

    /// Kinetic energy plus gravitational potential of the lumped body.
    pub fn energy(&self, character: &Character) -> f64 {
        let lin = 0.5 * character.total_mass * self.velocity.norm_squared();
        let rot: f64 = self
            .omega
            .iter()
            .zip(&character.inertia)
            .map(|(w, i)| 0.5 * i * w.norm_squared())
            .sum();
        lin + rot + character.total_mass * GRAVITY * self.tau.z
    }

    fn is_finite(&self) -> bool {
        self.tau
            .iter()
            .chain(self.velocity.iter())
            .all(|x| x.is_finite())
            && self.omega.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.locals.iter().all(|r| r.iter().all(|x| x.is_finite()))
    }
}

fn clamp_norm(v: Vector3<f64>, limit: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > limit && n > 0.0 {
        v * (limit / n)
    } else {
        v
    }
}

/// PD control toward `target`: joint torques from the rotation log-map
/// error and root residual force from the translation error, both clamped.
pub fn pd_policy(character: &Character, state: &SimState, target: &RefPose) -> Action {
    let cfg = &character.config;
    let torques = state
        .locals
        .iter()
        .zip(&target.locals)
        .zip(&state.omega)
        .map(|((r, t), w)| {
            let err = log_map(&(t * r.transpose()));
            clamp_norm(cfg.kp * err - cfg.kd * w, cfg.torque_limit)
        })
        .collect();
    let residual = clamp_norm(
        cfg.kp_root * (target.tau - state.tau) - cfg.kd_root * state.velocity,
        cfg.residual_limit,
    );
    Action { torques, residual }
}

/// World-frame rotation axis of joint `k`'s local degrees of freedom.
fn parent_global(pose: &Pose, character: &Character, k: usize) -> Matrix3<f64> {
    match character.skeleton.parents[k] {
        Some(p) => pose.globals[p],
        None => Matrix3::identity(),
    }
}

/// One semi-implicit Euler step. Uniform gravity on the root translation is
/// integrated exactly; every other force uses the updated velocity.
pub fn step_sim(
    character: &Character,
    state: &SimState,
    action: &Action,
    dt: f64,
) -> Result<SimState> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let cfg = &character.config;
    let skel = &character.skeleton;
    let j = character.joint_count();
    let pose = state.pose(character);
    let axes: Vec<Matrix3<f64>> = (0..j).map(|k| parent_global(&pose, character, k)).collect();

    let mut force = action.residual;
    let mut torque: Vec<Vector3<f64>> = action.torques.clone();
    for k in 0..j {
        torque[k] -= cfg.passive_damping * state.omega[k];
        if k > 0 {
            let r = log_map(&state.locals[k]);
            let angle = r.norm();
            if angle > cfg.angle_limit {
                torque[k] -= cfg.limit_stiffness * (angle - cfg.angle_limit) * r / angle;
            }
        }
    }

    let mut contacts = state.contacts.clone();
    for (ci, &c) in character.contact_points.iter().enumerate() {
        let p = pose.positions[c];
        let mut v = state.velocity;
        let mut a = skel.parents[c];
        while let Some(k) = a {
            v += (axes[k] * state.omega[k]).cross(&(p - pose.positions[k]));
            a = skel.parents[k];
        }
        let pen = -p.z;
        let cs = &mut contacts[ci];
        if pen <= 0.0 {
            *cs = ContactState {
                anchor: None,
                normal_force: 0.0,
                penetration: 0.0,
            };
            continue;
        }
        let fn_ = (cfg.contact_stiffness * pen - cfg.contact_damping * v.z).max(0.0);
        let anchor = cs.anchor.unwrap_or(p.xy());
        let mut ft = -cfg.tangent_stiffness * (p.xy() - anchor) - cfg.tangent_damping * v.xy();
        let cap = cfg.friction * fn_;
        let new_anchor = if ft.norm() > cap {
            ft *= if ft.norm() > 0.0 {
                cap / ft.norm()
            } else {
                0.0
            };
            p.xy() + ft / cfg.tangent_stiffness
        } else {
            anchor
        };
        *cs = ContactState {
            anchor: Some(new_anchor),
            normal_force: fn_,
            penetration: pen,
        };
        let f = Vector3::new(ft.x, ft.y, fn_);
        force += f;
        let mut a = skel.parents[c];
        while let Some(k) = a {
            torque[k] += axes[k].transpose() * (p - pose.positions[k]).cross(&f);
            a = skel.parents[k];
        }
    }

    let g = Vector3::new(0.0, 0.0, -GRAVITY);
    let velocity = state.velocity + dt * (force / character.total_mass + g);
    let tau = state.tau + dt * velocity - 0.5 * dt * dt * g;
    let mut omega = state.omega.clone();
    let mut locals = state.locals.clone();
    for k in 0..j {
        omega[k] += dt * torque[k] / character.inertia[k];
        locals[k] = exp_map(&(dt * omega[k])) * locals[k];
    }
    let next = SimState {
        locals,
        tau,
        velocity,
        omega,
        contacts,
        time: state.time + dt,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("simulation state".into()));
    }
    Ok(next)
}

/// Mean geodesic angle between the state's local rotations and a target.
pub fn mean_angle_error(state: &SimState, target: &RefPose) -> f64 {
    let n = state.locals.len() as f64;
    state
        .locals
        .iter()
        .zip(&target.locals)
        .map(|(a, b)| crate::motion::rotation::geodesic_angle(a, b))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::axis_angle;
    use crate::synth::make_skeleton;
    use crate::tracker::{build_character, TrackerConfig};
    use proptest::prelude::*;

    fn biped(cfg: TrackerConfig) -> Character {
        build_character(&make_skeleton("biped9").unwrap(), &[1.0, 1.0], &cfg).unwrap()
    }

    /// Identity pose with the soles `clearance` metres above the ground.
    fn standing(character: &Character, clearance: f64) -> SimState {
        let j = character.joint_count();
        let pose = fk_pose(
            &character.skeleton,
            &vec![Matrix3::identity(); j],
            Vector3::zeros(),
        );
        let lowest = pose
            .positions
            .iter()
            .map(|p| p.z)
            .fold(f64::INFINITY, f64::min);
        let frame = Frame {
            rot6d: vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; j],
            tau: [0.0, 0.0, clearance - lowest],
        };
        SimState::from_frame(character, &frame).unwrap()
    }

    fn target_of(state: &SimState) -> RefPose {
        RefPose {
            locals: state.locals.clone(),
            tau: state.tau,
        }
    }

    #[test]
    fn at_reference_action_is_zero() {
        let c = biped(TrackerConfig::default());
        let s = standing(&c, 0.0);
        let a = pd_policy(&c, &s, &target_of(&s));
        assert_eq!(a, Action::zero(9));
    }

    #[test]
    fn damping_opposes_velocity() {
        let c = biped(TrackerConfig::default());
        let mut s = standing(&c, 0.0);
        s.omega[4] = Vector3::new(0.0, 0.3, 0.0);
        s.velocity = Vector3::new(0.1, 0.0, 0.0);
        let t = target_of(&s);
        let a = pd_policy(&c, &s, &t);
        assert!(a.torques[4].dot(&s.omega[4]) < 0.0);
        assert!((a.torques[4] + c.config.kd * s.omega[4]).norm() < 1e-12);
        assert!(a.residual.dot(&s.velocity) < 0.0);
    }

    proptest! {
        #[test]
        fn action_respects_clamps(
            angles in prop::collection::vec(-3.1f64..3.1, 9),
            speeds in prop::collection::vec(-50.0f64..50.0, 9),
            dz in -3.0f64..3.0,
        ) {
            let c = biped(TrackerConfig::default());
            let mut s = standing(&c, 0.0);
            for k in 0..9 {
                s.locals[k] = axis_angle(Vector3::new(1.0, 0.5, -0.3), angles[k]);
                s.omega[k] = Vector3::new(speeds[k], -speeds[k], 0.5 * speeds[k]);
            }
            let mut t = target_of(&standing(&c, 0.0));
            t.tau.z += dz;
            let a = pd_policy(&c, &s, &t);
            for tq in &a.torques {
                prop_assert!(tq.norm() <= c.config.torque_limit * (1.0 + 1e-12));
            }
            prop_assert!(a.residual.norm() <= c.config.residual_limit * (1.0 + 1e-12));
        }
    }

    #[test]
    fn free_fall_is_ballistic() {
        let c = biped(TrackerConfig::default());
        let mut s = standing(&c, 10.0);
        let z0 = s.tau.z;
        let steps = (0.5 / c.config.dt).round() as usize;
        for _ in 0..steps {
            s = step_sim(&c, &s, &Action::zero(9), c.config.dt).unwrap();
            assert!(s.contacts.iter().all(|k| k.normal_force == 0.0));
        }
        let t = steps as f64 * c.config.dt;
        assert!(
            (s.tau.z - (z0 - 0.5 * GRAVITY * t * t)).abs() < 1e-3,
            "z {}",
            s.tau.z
        );
    }

    #[test]
    fn resting_character_stays_put() {
        let c = biped(TrackerConfig::default());
        let mut s = standing(&c, 0.0);
        let zero = Action::zero(9);
        for _ in 0..600 {
            s = step_sim(&c, &s, &zero, c.config.dt).unwrap();
        }
        let settled = s.tau;
        for _ in 0..100 * c.config.substeps {
            s = step_sim(&c, &s, &zero, c.config.dt).unwrap();
            assert!(s.contacts.iter().all(|k| k.normal_force >= 0.0));
            assert!(s
                .contacts
                .iter()
                .all(|k| k.penetration <= c.config.penetration_tolerance));
        }
        assert!(
            (s.tau - settled).norm() < 1e-3,
            "drift {}",
            (s.tau - settled).norm()
        );
        let loaded: f64 = s.contacts.iter().map(|k| k.normal_force).sum();
        assert!(
            (loaded - c.total_mass * GRAVITY).abs() < 1.0,
            "support {loaded}"
        );
    }

    #[test]
    fn dropped_character_never_pulled_into_ground() {
        let c = biped(TrackerConfig::default());
        let mut s = standing(&c, 0.3);
        s.velocity = Vector3::new(0.5, 0.0, -1.0);
        s.omega[0] = Vector3::new(0.0, 0.4, 0.0);
        for _ in 0..900 {
            s = step_sim(&c, &s, &Action::zero(9), c.config.dt).unwrap();
            assert!(s.contacts.iter().all(|k| k.normal_force >= 0.0));
        }
    }

    #[test]
    fn passive_motion_loses_energy() {
        let c = biped(TrackerConfig {
            passive_damping: 2.0,
            ..TrackerConfig::default()
        });
        let mut s = standing(&c, 50.0);
        for k in 0..9 {
            s.omega[k] = Vector3::new(0.3 * k as f64, -0.2, 0.1);
        }
        s.velocity = Vector3::new(1.0, 0.0, 2.0);
        let mut e = s.energy(&c);
        for _ in 0..300 {
            s = step_sim(&c, &s, &Action::zero(9), c.config.dt).unwrap();
            let next = s.energy(&c);
            assert!(next <= e + 1e-6 * e.abs(), "{next} > {e}");
            e = next;
        }
    }

    #[test]
    fn rejects_bad_step() {
        let c = biped(TrackerConfig::default());
        let s = standing(&c, 0.0);
        assert!(step_sim(&c, &s, &Action::zero(9), 0.0).is_err());
        let mut wild = Action::zero(9);
        wild.torques[3] = Vector3::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(
            step_sim(&c, &s, &wild, c.config.dt),
            Err(Error::NonFinite(_))
        ));
    }
}
