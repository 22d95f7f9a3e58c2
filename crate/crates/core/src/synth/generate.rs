use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::skeletons::{rig, Leg, Rig};
use crate::error::{Error, Result};
use crate::motion::rotation::{axis_angle, matrix_to_rot6d};
use crate::motion::{Frame, Motion, Skeleton};

pub const FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Idle,
    Squat,
    Walk,
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idle" => Ok(MotionKind::Idle),
            "squat" => Ok(MotionKind::Squat),
            "walk" => Ok(MotionKind::Walk),
            _ => Err(Error::Invalid(format!(
                "unknown motion kind '{s}', expected idle, squat or walk"
            ))),
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionKind::Idle => "idle",
            MotionKind::Squat => "squat",
            MotionKind::Walk => "walk",
        })
    }
}

/// Seeded knobs of a procedural gait.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Seconds per full cycle.
    pub period: f64,
    /// Meters travelled per cycle, as a fraction of leg length.
    pub stride: f64,
    /// Fraction of the cycle a foot stays planted.
    pub duty: f64,
    pub phase: f64,
    pub heading: f64,
    pub turn_rate: f64,
    pub swing_height: f64,
    pub bob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquatParams {
    /// Peak root drop in meters.
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdleParams {
    pub heading: f64,
    pub knee_bend: f64,
    pub jitter: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MotionPlan {
    Idle(IdleParams),
    Squat(SquatParams),
    Walk(GaitParams),
}

fn rx(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::x(), a)
}

fn ry(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::y(), a)
}

fn rz(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), a)
}

pub fn sample_plan(skeleton: &Skeleton, kind: MotionKind, seed: u64) -> MotionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading = rng.random_range(-PI..PI);
    match kind {
        MotionKind::Idle => MotionPlan::Idle(IdleParams {
            heading,
            knee_bend: rng.random_range(0.0..0.25),
            jitter: (0..skeleton.joint_count())
                .map(|_| std::array::from_fn(|_| rng.random_range(-0.15..0.15)))
                .collect(),
        }),
        MotionKind::Squat => {
            let leg = leg_length(skeleton, rig(skeleton).ok().as_ref());
            MotionPlan::Squat(SquatParams {
                amplitude: rng.random_range(0.15..0.3) * leg,
                frequency: rng.random_range(0.3..0.5),
                phase: rng.random_range(0.0..2.0 * PI),
                heading,
            })
        }
        MotionKind::Walk => MotionPlan::Walk(GaitParams {
            period: rng.random_range(0.9..1.1),
            stride: rng.random_range(0.6..0.9),
            duty: 0.6,
            phase: rng.random_range(0.0..1.0),
            heading,
            turn_rate: rng.random_range(-0.2..0.2),
            swing_height: rng.random_range(0.06..0.12),
            bob: rng.random_range(0.005..0.02),
        }),
    }
}

/// Ground-truth motion of `kind` with `frames` frames at 30 fps.
pub fn generate_motion(
    skeleton: &Skeleton,
    kind: MotionKind,
    frames: usize,
    seed: u64,
) -> Result<Motion> {
    render(skeleton, &sample_plan(skeleton, kind, seed), frames)
}

fn leg_length(skeleton: &Skeleton, rig: Option<&Rig>) -> f64 {
    match rig.and_then(|r| r.legs.first()) {
        Some(l) => skeleton.scaled_offset(l.knee).norm() + skeleton.scaled_offset(l.ankle).norm(),
        None => 1.0,
    }
}

/// Standing root height with legs at `reach` of full extension.
fn stand_height(skeleton: &Skeleton, rig: &Rig, reach: f64) -> f64 {
    let leg = rig.legs[0];
    -skeleton.scaled_offset(leg.hip).z + reach * leg_length(skeleton, Some(rig))
}

/// Two-bone leg IK. `d` is the ankle target relative to the hip, in the
/// root frame. Returns local (hip, knee, ankle) rotations; the ankle keeps
/// the foot aligned with the root.
fn leg_ik(skeleton: &Skeleton, leg: &Leg, d: Vector3<f64>) -> [Matrix3<f64>; 3] {
    let l1 = skeleton.scaled_offset(leg.knee).norm();
    let l2 = skeleton.scaled_offset(leg.ankle).norm();
    let roll = d.y.atan2(-d.z);
    let (s, c) = roll.sin_cos();
    let dx = d.x;
    let dz = -s * d.y + c * d.z;
    let reach = (dx * dx + dz * dz)
        .sqrt()
        .clamp((l1 - l2).abs() + 1e-6, 0.9999 * (l1 + l2));
    let cos_knee = ((reach * reach - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let knee = cos_knee.acos();
    let theta = (-dx).atan2(-dz);
    let alpha = (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
    let hip = rx(roll) * ry(theta - alpha);
    let knee_r = ry(knee);
    let ankle = (hip * knee_r).transpose();
    [hip, knee_r, ankle]
}

struct PoseBuilder {
    locals: Vec<Matrix3<f64>>,
    tau: Vector3<f64>,
}

impl PoseBuilder {
    fn new(joints: usize) -> Self {
        PoseBuilder {
            locals: vec![Matrix3::identity(); joints],
            tau: Vector3::zeros(),
        }
    }

    fn place_leg(&mut self, skeleton: &Skeleton, leg: &Leg, foot: Vector3<f64>) {
        let root_r = self.locals[0];
        let hip_world = self.tau + root_r * skeleton.scaled_offset(leg.hip);
        let [h, k, a] = leg_ik(skeleton, leg, root_r.transpose() * (foot - hip_world));
        self.locals[leg.hip] = h;
        self.locals[leg.knee] = k;
        self.locals[leg.ankle] = a;
    }

    fn frame(&self) -> Frame {
        Frame {
            rot6d: self
                .locals
                .iter()
                .map(|r| matrix_to_rot6d(r).expect("generator rotations are orthonormal"))
                .collect(),
            tau: self.tau.into(),
        }
    }
}

fn hip_ground_point(
    skeleton: &Skeleton,
    leg: &Leg,
    root_xy: Vector2<f64>,
    heading: f64,
) -> Vector3<f64> {
    let off = rz(heading) * skeleton.scaled_offset(leg.hip);
    Vector3::new(root_xy.x + off.x, root_xy.y + off.y, 0.0)
}

/// Render a plan into a motion.
pub fn render(skeleton: &Skeleton, plan: &MotionPlan, frames: usize) -> Result<Motion> {
    if frames < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 frames, got {frames}"
        )));
    }
    let r = rig(skeleton)?;
    let legged = !r.legs.is_empty();
    if !legged && !matches!(plan, MotionPlan::Idle(_)) {
        return Err(Error::Invalid(format!(
            "skeleton '{}' has no legs to walk or squat with",
            skeleton.name
        )));
    }
    let out = match plan {
        MotionPlan::Idle(p) => render_idle(skeleton, &r, p, frames),
        MotionPlan::Squat(p) => render_squat(skeleton, &r, p, frames),
        MotionPlan::Walk(p) => render_walk(skeleton, &r, p, frames)?,
    };
    Ok(Motion {
        fps: FPS,
        frames: out,
    })
}

fn render_idle(skeleton: &Skeleton, r: &Rig, p: &IdleParams, frames: usize) -> Vec<Frame> {
    let mut b = PoseBuilder::new(skeleton.joint_count());
    if r.legs.is_empty() {
        for (j, w) in p.jitter.iter().enumerate() {
            b.locals[j] = rz(w[0] * 4.0) * ry(w[1] * 4.0) * rx(w[2] * 4.0);
        }
        b.tau = Vector3::new(0.0, 0.0, 1.0);
    } else {
        b.locals[0] = rz(p.heading);
        let reach = p.knee_bend.cos();
        b.tau = Vector3::new(0.0, 0.0, stand_height(skeleton, r, reach));
        if let Some(s) = r.spine {
            b.locals[s] = ry(p.jitter[s][0]) * rx(p.jitter[s][1] * 0.5);
        }
        if let Some(h) = r.head {
            b.locals[h] = rz(p.jitter[h][0] * 2.0) * ry(p.jitter[h][1]);
        }
        for arm in &r.arms {
            let w = p.jitter[arm.shoulder];
            b.locals[arm.shoulder] = ry(w[0] * 2.0) * rx(w[1]);
            b.locals[arm.elbow] = ry(-0.2 + p.jitter[arm.elbow][0]);
        }
        for leg in &r.legs {
            let foot = hip_ground_point(skeleton, leg, Vector2::zeros(), p.heading);
            b.place_leg(skeleton, leg, foot);
        }
    }
    vec![b.frame(); frames]
}

fn render_squat(skeleton: &Skeleton, r: &Rig, p: &SquatParams, frames: usize) -> Vec<Frame> {
    let top = stand_height(skeleton, r, 0.99);
    (0..frames)
        .map(|h| {
            let t = h as f64 / FPS;
            let depth = 0.5 * (1.0 - (2.0 * PI * p.frequency * t + p.phase).cos());
            let mut b = PoseBuilder::new(skeleton.joint_count());
            b.locals[0] = rz(p.heading);
            b.tau = Vector3::new(0.0, 0.0, top - p.amplitude * depth);
            if let Some(s) = r.spine {
                b.locals[s] = ry(0.5 * depth);
            }
            if let Some(hd) = r.head {
                b.locals[hd] = ry(-0.3 * depth);
            }
            for arm in &r.arms {
                b.locals[arm.shoulder] = ry(-1.2 * depth);
                b.locals[arm.elbow] = ry(-0.3 * depth);
            }
            for leg in &r.legs {
                let foot = hip_ground_point(skeleton, leg, Vector2::zeros(), p.heading);
                b.place_leg(skeleton, leg, foot);
            }
            b.frame()
        })
        .collect()
}

struct Path {
    heading0: f64,
    turn: f64,
    speed: f64,
    origin: Vector2<f64>,
}

impl Path {
    fn heading(&self, t: f64) -> f64 {
        self.heading0 + self.turn * t
    }

    fn raw(&self, t: f64) -> Vector2<f64> {
        if self.turn.abs() < 1e-9 {
            return Vector2::new(self.heading0.cos(), self.heading0.sin()) * self.speed * t;
        }
        let k = self.speed / self.turn;
        let a = self.heading(t);
        Vector2::new(
            k * (a.sin() - self.heading0.sin()),
            -k * (a.cos() - self.heading0.cos()),
        )
    }

    fn at(&self, t: f64) -> Vector2<f64> {
        self.raw(t) - self.origin
    }
}

fn render_walk(skeleton: &Skeleton, r: &Rig, p: &GaitParams, frames: usize) -> Result<Vec<Frame>> {
    let duration = frames as f64 / FPS;
    if duration < p.period {
        return Err(Error::Invalid(format!(
            "walk needs at least one gait cycle ({:.2} s), got {frames} frames",
            p.period
        )));
    }
    let leg_len = leg_length(skeleton, Some(r));
    let mut path = Path {
        heading0: p.heading,
        turn: p.turn_rate,
        speed: p.stride * leg_len / p.period,
        origin: Vector2::zeros(),
    };
    path.origin = path.raw(0.5 * duration);
    let base = stand_height(skeleton, r, 0.93);

    // planted ankle position for stance `k` of leg `i`
    let plant = |i: usize, k: f64| -> Vector3<f64> {
        let t_mid = (k + p.duty / 2.0 - p.phase - 0.5 * i as f64) * p.period;
        hip_ground_point(skeleton, &r.legs[i], path.at(t_mid), path.heading(t_mid))
    };

    let out = (0..frames)
        .map(|h| {
            let t = h as f64 / FPS;
            let u = t / p.period + p.phase;
            let mut b = PoseBuilder::new(skeleton.joint_count());
            let heading = path.heading(t);
            b.locals[0] = rz(heading);
            let xy = path.at(t);
            b.tau = Vector3::new(xy.x, xy.y, base + p.bob * (4.0 * PI * u).cos());
            let sway = (2.0 * PI * u).sin();
            if let Some(s) = r.spine {
                b.locals[s] = ry(0.08) * rz(-0.12 * sway);
            }
            if let Some(hd) = r.head {
                b.locals[hd] = ry(-0.08) * rz(0.1 * sway);
            }
            for (side, arm) in r.arms.iter().enumerate() {
                let swing = if side == 0 { -sway } else { sway };
                b.locals[arm.shoulder] = ry(0.35 * swing);
                b.locals[arm.elbow] = ry(-0.3 - 0.15 * (1.0 + swing));
            }
            for (i, leg) in r.legs.iter().enumerate() {
                let ui = u + 0.5 * i as f64;
                let k = ui.floor();
                let ph = ui - k;
                let foot = if ph < p.duty {
                    plant(i, k)
                } else {
                    let s = (ph - p.duty) / (1.0 - p.duty);
                    let w = s * s * (3.0 - 2.0 * s);
                    let a = plant(i, k);
                    let c = plant(i, k + 1.0);
                    let mut f = a + (c - a) * w;
                    f.z = p.swing_height * (PI * s).sin();
                    f
                };
                b.place_leg(skeleton, leg, foot);
            }
            b.frame()
        })
        .collect();
    Ok(out)
}

/// Stance flags per (frame, foot) of a walk plan, in the skeleton's foot order.
pub fn stance_mask(plan: &GaitParams, frames: usize) -> Vec<[bool; 2]> {
    (0..frames)
        .map(|h| {
            let u = h as f64 / FPS / plan.period + plan.phase;
            std::array::from_fn(|i| {
                let ui = u + 0.5 * i as f64;
                ui - ui.floor() < plan.duty
            })
        })
        .collect()
}
