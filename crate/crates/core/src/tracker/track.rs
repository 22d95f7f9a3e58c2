use serde::{Deserialize, Serialize};

use super::character::Character;
use super::sim::{mean_angle_error, pd_policy, step_sim, RefPose, SimState};
use crate::error::{Error, Result};
use crate::motion::{Frame, Motion};

/// Outcome of imitating a reference motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub motion: Motion,
    pub success_mask: Vec<bool>,
    /// Mean joint-angle deviation per frame (rad).
    pub angle_error: Vec<f64>,
    /// Root height deviation per frame (m).
    pub height_error: Vec<f64>,
    pub success: bool,
    pub min_normal_force: f64,
    pub max_penetration: f64,
    /// Frame at which the simulation became non-finite, if it did.
    pub blowup: Option<usize>,
}

impl TrackResult {
    pub fn frames_succeeded(&self) -> usize {
        self.success_mask.iter().filter(|s| **s).count()
    }
}

/// Drive the character along `reference` with the PD controller.
pub fn track(character: &Character, reference: &Motion) -> Result<TrackResult> {
    let cfg = &character.config;
    if reference.is_empty() {
        return Err(Error::Invalid("empty reference motion".into()));
    }
    let control = 1.0 / (cfg.dt * cfg.substeps as f64);
    if (reference.fps - control).abs() > 1e-6 * control {
        return Err(Error::Invalid(format!(
            "reference runs at {} fps but the controller at {control} Hz",
            reference.fps
        )));
    }
    let targets: Vec<RefPose> = reference.frames.iter().map(RefPose::from_frame).collect();
    let mut state = SimState::from_frame(character, &reference.frames[0])?;
    let h_total = reference.len();
    let mut frames: Vec<Frame> = Vec::with_capacity(h_total);
    let mut mask = Vec::with_capacity(h_total);
    let mut angle_error = Vec::with_capacity(h_total);
    let mut height_error = Vec::with_capacity(h_total);
    let mut failed = false;
    let mut min_normal = f64::INFINITY;
    let mut max_pen: f64 = 0.0;
    let mut blowup = None;
    for h in 0..h_total {
        if h > 0 && blowup.is_none() {
            let target = &targets[h];
            for _ in 0..cfg.substeps {
                let action = pd_policy(character, &state, target);
                match step_sim(character, &state, &action, cfg.dt) {
                    Ok(next) => state = next,
                    Err(_) => {
                        blowup = Some(h);
                        break;
                    }
                }
                for c in &state.contacts {
                    min_normal = min_normal.min(c.normal_force);
                    max_pen = max_pen.max(c.penetration);
                }
            }
        }
        let ae = mean_angle_error(&state, &targets[h]);
        let he = (state.tau.z - targets[h].tau.z).abs();
        if blowup.is_some() || !(ae <= cfg.fail_angle && he <= cfg.fail_height) {
            failed = true;
        }
        mask.push(!failed);
        angle_error.push(ae);
        height_error.push(he);
        frames.push(state.to_frame());
    }
    let ok = mask.iter().filter(|s| **s).count();
    let success = ok as f64 >= cfg.success_fraction * h_total as f64;
    if let Some(h) = blowup {
        log::warn!("simulation blew up at frame {h}");
    }
    Ok(TrackResult {
        motion: Motion {
            fps: reference.fps,
            frames,
        },
        success_mask: mask,
        angle_error,
        height_error,
        success: success && blowup.is_none(),
        min_normal_force: if min_normal.is_finite() {
            min_normal
        } else {
            0.0
        },
        max_penetration: max_pen,
        blowup,
    })
}

/// Fraction of sequences tracked successfully.
pub fn success_rate(results: &[TrackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("success rate of an empty corpus".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}
