//! Physics guidance: projection-loss gradients of tracked motions, the
//! denoiser condition, and the track-then-denoise capture loop.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    latent_state_noise, mean_shift_estimate, place_at_level, reverse_step, Denoiser,
    DiffusionSchedule, StateNoise,
};
use crate::error::{Error, Result};
use crate::motion::metrics::mean_report;
use crate::motion::{compute_metrics, state_positions, Camera, MetricReport, Motion, Skeleton};
use crate::nn::Mat;
use crate::ops::PROJ_MIN_DEPTH;
use crate::synth::{Observations, Sample};
use crate::tracker::{build_character, track, Character, TrackResult, TrackerConfig};
use crate::vae::{StateStats, VaeModel};

/// Gradient of `sum_j c_j |proj(P_j) - p_j|^2` wrt every 3D joint position,
/// zero on frames where `mask` is false and for joints behind the camera.
pub fn projection_gradient(
    positions: &Mat,
    keypoints: &Mat,
    confidence: &Mat,
    camera: &Camera,
    mask: &[bool],
) -> Result<Mat> {
    let (h, w) = positions.shape();
    let j = w / 3;
    if w % 3 != 0
        || keypoints.shape() != (h, 2 * j)
        || confidence.shape() != (h, j)
        || mask.len() != h
    {
        return Err(Error::Shape(format!(
            "positions {:?}, keypoints {:?}, confidence {:?}, mask {}",
            positions.shape(),
            keypoints.shape(),
            confidence.shape(),
            mask.len()
        )));
    }
    let mut grad = Mat::zeros(h, w);
    let mut behind = 0usize;
    for f in 0..h {
        if !mask[f] {
            continue;
        }
        for k in 0..j {
            let p = Vector3::new(
                positions[(f, 3 * k)],
                positions[(f, 3 * k + 1)],
                positions[(f, 3 * k + 2)],
            );
            let c = camera.to_camera(&p);
            if c.z <= PROJ_MIN_DEPTH {
                behind += 1;
                continue;
            }
            let px = camera.pixel(&c);
            let r = nalgebra::Vector2::new(
                px.x - keypoints[(f, 2 * k)],
                px.y - keypoints[(f, 2 * k + 1)],
            );
            let g = camera.pixel_jacobian(&c).transpose() * r * (2.0 * confidence[(f, k)]);
            for d in 0..3 {
                grad[(f, 3 * k + d)] = g[d];
            }
        }
    }
    if behind > 0 {
        log::warn!("{behind} joint observations behind the camera contribute no gradient");
    }
    Ok(grad)
}

/// How gradient channels are scaled before entering the condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    /// Divide by the root mean square over the sequence.
    UnitRms,
    Fixed(f64),
}

/// Per-frame `[embedding | scaled gradient | flag]`; with `executed = false`
/// the gradient channels and flag are zero.
pub fn build_condition(
    embedding: &Mat,
    gradients: &Mat,
    executed: bool,
    scale: GradientScale,
) -> Result<Mat> {
    if embedding.nrows() != gradients.nrows() {
        return Err(Error::Shape(format!(
            "{} embedding frames but {} gradient frames",
            embedding.nrows(),
            gradients.nrows()
        )));
    }
    let df = embedding.ncols();
    let dg = gradients.ncols();
    let factor = match scale {
        GradientScale::UnitRms => {
            let rms = (gradients.norm_squared() / gradients.len().max(1) as f64).sqrt();
            if rms > 0.0 {
                1.0 / rms
            } else {
                0.0
            }
        }
        GradientScale::Fixed(c) => c,
    };
    Ok(Mat::from_fn(embedding.nrows(), df + dg + 1, |r, c| {
        if c < df {
            embedding[(r, c)]
        } else if !executed {
            0.0
        } else if c < df + dg {
            factor * gradients[(r, c - df)]
        } else {
            1.0
        }
    }))
}

pub fn condition_dim(embedding_dim: usize, joints: usize) -> usize {
    embedding_dim + 3 * joints + 1
}

/// Everything needed to run the tracker on a sequence and turn the outcome
/// into a denoiser input.
pub struct GuideContext<'a> {
    pub stats: &'a StateStats,
    pub character: &'a Character,
    pub camera: &'a Camera,
    pub keypoints: Mat,
    pub confidence: Mat,
    /// Per-frame image features.
    pub embedding: Mat,
    pub fps: f64,
}

/// Result of tracking the current motion estimate at one step.
pub struct GuidedStep {
    /// Denoiser input: tracked motion at the step's level on successful
    /// frames, the unguided state elsewhere.
    pub input: Mat,
    pub condition: Mat,
    pub track: TrackResult,
}

/// Track the motion implied by `x_t` and build the guided input. Returns
/// `None` if the simulation blew up.
pub fn guided_step(
    ctx: &GuideContext,
    schedule: &DiffusionSchedule,
    x_t: &Mat,
    t: usize,
    noise: &StateNoise,
    gradient_on: bool,
    scale: GradientScale,
) -> Result<Option<GuidedStep>> {
    let estimate = ctx
        .stats
        .denormalize(&mean_shift_estimate(schedule, x_t, t, noise));
    let reference = Motion::from_state(&estimate, ctx.fps)?;
    let result = track(ctx.character, &reference)?;
    if result.blowup.is_some() {
        return Ok(None);
    }
    let tracked = result.motion.to_state();
    let placed = place_at_level(schedule, &ctx.stats.normalize(&tracked), t, noise);
    let input = Mat::from_fn(x_t.nrows(), x_t.ncols(), |r, c| {
        if result.success_mask[r] {
            placed[(r, c)]
        } else {
            x_t[(r, c)]
        }
    });
    let grad = if gradient_on {
        let positions = state_positions(&ctx.character.skeleton, &tracked);
        projection_gradient(
            &positions,
            &ctx.keypoints,
            &ctx.confidence,
            ctx.camera,
            &result.success_mask,
        )?
    } else {
        Mat::zeros(x_t.nrows(), 3 * ctx.character.joint_count())
    };
    let condition = build_condition(&ctx.embedding, &grad, true, scale)?;
    Ok(Some(GuidedStep {
        input,
        condition,
        track: result,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    LastS,
    FirstS,
    EvenlySpaced,
}

impl Placement {
    /// Whether step `t` (counting down from `steps` to 1) is guided.
    pub fn is_guided(self, t: usize, steps: usize, guided: usize) -> bool {
        if guided == 0 || t == 0 || t > steps {
            return false;
        }
        match self {
            Placement::LastS => t <= guided,
            Placement::FirstS => t > steps - guided,
            Placement::EvenlySpaced => {
                // position in execution order, 0-based
                let k = steps - t;
                (0..guided).any(|i| (i * steps) / guided == k)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Latent,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingMode {
    Guided,
    PostHoc,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Denoising steps T; 0 returns the initial sample.
    pub steps: usize,
    /// Guided steps s.
    pub guided_steps: usize,
    pub placement: Placement,
    pub gradient_scale: GradientScale,
    pub init: InitMode,
    pub tracking: TrackingMode,
    pub gradient_condition: bool,
    pub stochastic: bool,
    pub noise_samples: usize,
    pub noise_floor: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            steps: 5,
            guided_steps: 3,
            placement: Placement::LastS,
            gradient_scale: GradientScale::UnitRms,
            init: InitMode::Latent,
            tracking: TrackingMode::Guided,
            gradient_condition: true,
            stochastic: true,
            noise_samples: 16,
            noise_floor: 1e-3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guided_steps > self.steps {
            return Err(Error::Invalid(format!(
                "guided steps {} exceed denoising steps {}",
                self.guided_steps, self.steps
            )));
        }
        if self.tracking != TrackingMode::Guided && self.guided_steps > 0 {
            return Err(Error::Invalid(
                "guided steps need tracking mode 'guided'".into(),
            ));
        }
        if self.noise_samples < 2 || !(self.noise_floor > 0.0) {
            return Err(Error::Invalid(
                "need at least two noise draws and a positive noise floor".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub guided: bool,
    /// The tracker blew up and the step ran unguided.
    pub fallback: bool,
    pub frames_tracked: Option<usize>,
    /// RMS change of the clean estimate relative to the previous step.
    pub update_rms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureOutput {
    pub motion: Motion,
    pub beta: Vec<f64>,
    /// Tracking of the final motion, when a tracker is available.
    pub track: Option<TrackResult>,
    pub diagnostics: Diagnostics,
}

/// Models and settings shared by every capture call.
pub struct Pipeline<'a> {
    pub vae: &'a VaeModel,
    /// Unit-scale skeleton; the decoded shape scales are applied to it.
    pub skeleton: &'a Skeleton,
    pub denoiser: Option<&'a Denoiser>,
    pub tracker: Option<&'a TrackerConfig>,
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rand::Rng::random(&mut rng)
}

/// Reconstruct a motion from observations with the track-then-denoise loop.
pub fn capture(
    pipe: &Pipeline,
    obs: &Observations,
    camera: &Camera,
    fps: f64,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<CaptureOutput> {
    cfg.validate()?;
    obs.validate()?;
    let features = obs.feature_matrix();
    let vae = pipe.vae;
    let stats = vae.stats();
    let dists = vae.encode(&features)?;
    let (_, beta) = vae.decode_state(&dists.mu)?;
    let frames = features.nrows();
    let dim = vae.arch.state_dim();
    let noise = match cfg.init {
        InitMode::Latent => latent_state_noise(
            vae,
            &dists,
            cfg.noise_samples,
            cfg.noise_floor,
            seed_for(seed, 1),
        )?,
        InitMode::Standard => StateNoise::standard(frames, dim),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 2));
    let mut x = noise.sample(&mut rng);
    let character = match pipe.tracker {
        Some(tc) => Some(build_character(pipe.skeleton, &beta, tc)?),
        None => None,
    };
    let ctx = character.as_ref().map(|ch| GuideContext {
        stats: &stats,
        character: ch,
        camera,
        keypoints: obs.keypoint_matrix(),
        confidence: obs.confidence_matrix(),
        embedding: features.clone(),
        fps,
    });
    let mut diagnostics = Diagnostics::default();
    let mut estimate = x.clone();
    if cfg.steps > 0 {
        let denoiser = pipe
            .denoiser
            .ok_or_else(|| Error::Invalid("denoising steps requested without a denoiser".into()))?;
        if denoiser.arch.state_dim != dim {
            return Err(Error::Shape(
                "denoiser and VAE disagree on the state size".into(),
            ));
        }
        if denoiser.noise.init != cfg.init {
            return Err(Error::Invalid(format!(
                "denoiser was trained with {:?} noise but {:?} was requested",
                denoiser.noise.init, cfg.init
            )));
        }
        let schedule = denoiser.schedule(cfg.steps)?;
        let grad_dim = denoiser.arch.cond_dim - features.ncols() - 1;
        let unguided = build_condition(
            &features,
            &Mat::zeros(frames, grad_dim),
            false,
            cfg.gradient_scale,
        )?;
        for t in (1..=cfg.steps).rev() {
            let wants_guide = cfg.tracking == TrackingMode::Guided
                && cfg.placement.is_guided(t, cfg.steps, cfg.guided_steps);
            let mut record = StepRecord {
                t,
                guided: false,
                fallback: false,
                frames_tracked: None,
                update_rms: 0.0,
            };
            let mut input = None;
            if wants_guide {
                match &ctx {
                    Some(ctx) => match guided_step(
                        ctx,
                        &schedule,
                        &x,
                        t,
                        &noise,
                        cfg.gradient_condition,
                        cfg.gradient_scale,
                    )? {
                        Some(g) => {
                            record.guided = true;
                            record.frames_tracked = Some(g.track.frames_succeeded());
                            input = Some((g.input, g.condition));
                        }
                        None => {
                            log::warn!("tracker blew up at step {t}; running the step unguided");
                            record.fallback = true;
                        }
                    },
                    None => record.fallback = true,
                }
            }
            let (inp, cond) = input.unwrap_or_else(|| (x.clone(), unguided.clone()));
            let x0 = denoiser.denoise(&schedule, &inp, t, &cond)?;
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("denoiser output at step {t}")));
            }
            record.update_rms = ((&x0 - &estimate).norm_squared() / x0.len() as f64).sqrt();
            x = reverse_step(
                &schedule,
                &x,
                &x0,
                t,
                &noise,
                seed_for(seed, 100 + t as u64),
                cfg.stochastic,
            )?;
            estimate = x0;
            diagnostics.steps.push(record);
        }
    }
    let motion = Motion::from_state(&stats.denormalize(&estimate), fps)?.orthonormalized();
    let track_result = match &character {
        Some(ch) => Some(track(ch, &motion)?),
        None => None,
    };
    let motion = match (&track_result, cfg.tracking) {
        (Some(r), TrackingMode::PostHoc) => r.motion.orthonormalized(),
        (None, TrackingMode::PostHoc) => {
            return Err(Error::Invalid(
                "post-hoc tracking requested without a tracker".into(),
            ))
        }
        _ => motion,
    };
    Ok(CaptureOutput {
        motion,
        beta,
        track: track_result,
        diagnostics,
    })
}

/// Named ablation arm, e.g. `latent-T5`, `posthoc-T0`, `guided-s3-T5`,
/// `guided-s3-T5-nograd`, `standard-T10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: GuidanceConfig,
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(name: &str) -> Result<Arm> {
        let bad = || Error::Invalid(format!("unknown arm '{name}'"));
        let parts: Vec<&str> = name.split('-').collect();
        let num = |p: &str, prefix: char| -> Result<usize> {
            p.strip_prefix(prefix)
                .and_then(|n| n.parse().ok())
                .ok_or_else(bad)
        };
        let mut cfg = GuidanceConfig {
            guided_steps: 0,
            tracking: TrackingMode::None,
            ..GuidanceConfig::default()
        };
        match parts.as_slice() {
            ["standard", t] => {
                cfg.init = InitMode::Standard;
                cfg.steps = num(t, 'T')?;
            }
            ["latent", t] => cfg.steps = num(t, 'T')?,
            ["posthoc", t] => {
                cfg.steps = num(t, 'T')?;
                cfg.tracking = TrackingMode::PostHoc;
            }
            ["guided", s, t, rest @ ..] => {
                cfg.guided_steps = num(s, 's')?;
                cfg.steps = num(t, 'T')?;
                cfg.tracking = TrackingMode::Guided;
                match rest {
                    [] => {}
                    ["nograd"] => cfg.gradient_condition = false,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
        if cfg.init == InitMode::Standard && cfg.steps == 0 {
            return Err(bad());
        }
        cfg.validate()?;
        Ok(Arm {
            name: name.to_string(),
            config: cfg,
        })
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub const INIT_ARMS: [&str; 8] = [
    "standard-T1",
    "latent-T1",
    "standard-T5",
    "latent-T5",
    "standard-T10",
    "latent-T10",
    "standard-T50",
    "latent-T50",
];

pub const TRACKING_ARMS: [&str; 17] = [
    "latent-T0",
    "posthoc-T0",
    "latent-T1",
    "latent-T3",
    "latent-T5",
    "guided-s1-T5",
    "guided-s2-T5",
    "guided-s3-T5",
    "guided-s5-T5",
    "guided-s1-T7",
    "guided-s2-T7",
    "guided-s3-T7",
    "guided-s5-T7",
    "guided-s1-T10",
    "guided-s2-T10",
    "guided-s3-T10",
    "guided-s5-T10",
];

pub const GRADIENT_ARMS: [&str; 2] = ["guided-s3-T5", "guided-s3-T5-nograd"];

/// Frozen models available to an ablation run.
pub struct Models<'a> {
    pub vae: &'a VaeModel,
    pub skeleton: &'a Skeleton,
    pub latent: Option<&'a Denoiser>,
    pub standard: Option<&'a Denoiser>,
    pub tracker: Option<&'a TrackerConfig>,
}

impl<'a> Models<'a> {
    /// Pipeline for an arm, or `None` when a model it needs is missing.
    pub fn pipeline(&self, cfg: &GuidanceConfig) -> Option<Pipeline<'a>> {
        let denoiser = match (cfg.steps, cfg.init) {
            (0, _) => None,
            (_, InitMode::Latent) => Some(self.latent?),
            (_, InitMode::Standard) => Some(self.standard?),
        };
        let tracker = match cfg.tracking {
            TrackingMode::None => self.tracker,
            _ => Some(self.tracker?),
        };
        Some(Pipeline {
            vae: self.vae,
            skeleton: self.skeleton,
            denoiser,
            tracker,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub sequences: usize,
    /// Mean over sequences; `success_rate` is present when a tracker was available.
    pub metrics: MetricReport,
    /// Guided steps that fell back to unguided after a tracker blowup.
    pub fallbacks: usize,
}

/// Seed used for sequence `index`; every arm sees the same one.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed_for(seed, 0x1000 + index as u64)
}

/// Run every arm over `samples`, fanning out over sequences. Arms whose
/// model is missing are skipped with a warning.
pub fn ablate(
    samples: &[&Sample],
    base: &Skeleton,
    camera: &Camera,
    models: &Models,
    arms: &[Arm],
    seed: u64,
) -> Result<Vec<ArmReport>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no sequences to evaluate".into()));
    }
    let mut out = Vec::with_capacity(arms.len());
    for arm in arms {
        let Some(pipe) = models.pipeline(&arm.config) else {
            log::warn!("skipping arm {arm}: a required model is missing");
            continue;
        };
        let per_seq: Vec<(MetricReport, usize)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let res = capture(
                    &pipe,
                    &s.observations,
                    camera,
                    s.motion.fps,
                    &arm.config,
                    sequence_seed(seed, i),
                )?;
                let mut report = compute_metrics(&res.motion, &s.motion, &s.skeleton(base)?)?;
                report.success_rate = res
                    .track
                    .as_ref()
                    .map(|t| if t.success { 1.0 } else { 0.0 });
                let fallbacks = res.diagnostics.steps.iter().filter(|r| r.fallback).count();
                Ok((report, fallbacks))
            })
            .collect::<Result<_>>()?;
        let reports: Vec<MetricReport> = per_seq.iter().map(|(r, _)| r.clone()).collect();
        let metrics = mean_report(&reports).expect("nonempty");
        log::info!(
            "arm {arm}: PA-MPJPE {:.1} e_s {:.2} success {:?}",
            metrics.pa_mpjpe,
            metrics.e_s,
            metrics.success_rate
        );
        out.push(ArmReport {
            arm: arm.name.clone(),
            sequences: samples.len(),
            metrics,
            fallbacks: per_seq.iter().map(|(_, f)| f).sum(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserArch, NoiseSpec};
    use crate::synth::dataset::{default_camera, generate_dataset, DataConfig};
    use crate::synth::Dataset;
    use crate::vae::{train_vae, VaeConfig};
    use rand::Rng;

    fn camera() -> Camera {
        default_camera()
    }

    fn random_positions(h: usize, j: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(h, 3 * j, |_, c| match c % 3 {
            1 => rng.random_range(0.2..1.6),
            _ => rng.random_range(-0.5..0.5),
        })
    }

    fn projected(positions: &Mat, cam: &Camera) -> Mat {
        let j = positions.ncols() / 3;
        Mat::from_fn(positions.nrows(), 2 * j, |f, c| {
            let k = c / 2;
            let p = Vector3::new(
                positions[(f, 3 * k)],
                positions[(f, 3 * k + 1)],
                positions[(f, 3 * k + 2)],
            );
            cam.pixel(&cam.to_camera(&p))[c % 2]
        })
    }

    fn loss(positions: &Mat, keypoints: &Mat, confidence: &Mat, cam: &Camera) -> f64 {
        let px = projected(positions, cam);
        let mut total = 0.0;
        for f in 0..positions.nrows() {
            for k in 0..confidence.ncols() {
                let dx = px[(f, 2 * k)] - keypoints[(f, 2 * k)];
                let dy = px[(f, 2 * k + 1)] - keypoints[(f, 2 * k + 1)];
                total += confidence[(f, k)] * (dx * dx + dy * dy);
            }
        }
        total
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let cam = camera();
        let p = random_positions(4, 5, 1);
        let kp = projected(&p, &cam);
        let g =
            projection_gradient(&p, &kp, &Mat::from_element(4, 5, 0.7), &cam, &[true; 4]).unwrap();
        assert!(g.abs().max() < 1e-9);
    }

    #[test]
    fn gradient_matches_differences() {
        let cam = camera();
        let p = random_positions(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kp = projected(&p, &cam).map(|v| v + rng.random_range(-6.0..6.0));
        let conf = Mat::from_fn(3, 4, |_, _| rng.random_range(0.1..1.0));
        let g = projection_gradient(&p, &kp, &conf, &cam, &[true; 3]).unwrap();
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += eps;
            let mut down = p.clone();
            down[i] -= eps;
            let fd = (loss(&up, &kp, &conf, &cam) - loss(&down, &kp, &conf, &cam)) / (2.0 * eps);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-3),
                "entry {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn masked_frames_and_hidden_joints_get_no_gradient() {
        let cam = camera();
        let mut p = random_positions(3, 2, 4);
        let kp = projected(&p, &cam).add_scalar(5.0);
        let conf = Mat::from_element(3, 2, 1.0);
        let g = projection_gradient(&p, &kp, &conf, &cam, &[true, false, true]).unwrap();
        assert!(g.row(1).iter().all(|v| *v == 0.0));
        assert!(g.row(0).iter().any(|v| *v != 0.0));

        let other =
            projection_gradient(&p, &kp.map(|v| v * 3.0), &conf, &cam, &[true, false, true])
                .unwrap();
        assert!(other.row(1).iter().all(|v| *v == 0.0));

        let behind = cam.camera_center() - cam.rotation_matrix().transpose() * Vector3::z();
        assert!(cam.to_camera(&behind).z < 0.0);
        for d in 0..3 {
            p[(0, d)] = behind[d];
        }
        let g = projection_gradient(&p, &kp, &conf, &cam, &[true; 3]).unwrap();
        assert!((0..3).all(|d| g[(0, d)] == 0.0));
        assert!(projection_gradient(&p, &kp, &conf, &cam, &[true; 2]).is_err());
    }

    #[test]
    fn unexecuted_condition_zeros_guidance_channels() {
        let emb = Mat::from_element(3, 2, 0.5);
        let grad = Mat::from_fn(3, 6, |r, c| (r + c) as f64);
        let off = build_condition(&emb, &grad, false, GradientScale::UnitRms).unwrap();
        assert_eq!(off.ncols(), condition_dim(2, 2));
        assert!(off.columns(2, 7).iter().all(|v| *v == 0.0));
        let on = build_condition(&emb, &grad, true, GradientScale::UnitRms).unwrap();
        assert!(on.column(8).iter().all(|v| *v == 1.0));
        let g = on.columns(2, 6);
        assert!(((g.norm_squared() / g.len() as f64).sqrt() - 1.0).abs() < 1e-12);
        let fixed = build_condition(&emb, &grad, true, GradientScale::Fixed(0.5)).unwrap();
        assert_eq!(fixed[(2, 7)], 0.5 * grad[(2, 5)]);
        let zero = build_condition(&emb, &Mat::zeros(3, 6), true, GradientScale::UnitRms).unwrap();
        assert!(zero.columns(2, 6).iter().all(|v| *v == 0.0));
        assert!(build_condition(&emb, &Mat::zeros(2, 6), true, GradientScale::UnitRms).is_err());
    }

    #[test]
    fn placement_rules() {
        let guided = |p: Placement, steps, s| {
            (1..=steps)
                .rev()
                .filter(|&t| p.is_guided(t, steps, s))
                .collect::<Vec<_>>()
        };
        assert_eq!(guided(Placement::LastS, 5, 3), vec![3, 2, 1]);
        assert_eq!(guided(Placement::FirstS, 5, 3), vec![5, 4, 3]);
        assert_eq!(guided(Placement::EvenlySpaced, 10, 2), vec![10, 5]);
        for p in [Placement::LastS, Placement::FirstS, Placement::EvenlySpaced] {
            for steps in 1..12 {
                for s in 0..=steps {
                    assert_eq!(guided(p, steps, s).len(), s);
                }
            }
        }
    }

    #[test]
    fn arm_names_parse() {
        let a: Arm = "guided-s3-T5-nograd".parse().unwrap();
        assert_eq!((a.config.guided_steps, a.config.steps), (3, 5));
        assert!(!a.config.gradient_condition);
        assert_eq!(a.config.tracking, TrackingMode::Guided);
        let p: Arm = "posthoc-T0".parse().unwrap();
        assert_eq!(p.config.tracking, TrackingMode::PostHoc);
        let s: Arm = "standard-T50".parse().unwrap();
        assert_eq!(s.config.init, InitMode::Standard);
        assert_eq!(s.to_string(), "standard-T50");
        for bad in [
            "standard-T0",
            "guided-s6-T5",
            "guided-s3-T5-x",
            "latent",
            "latent-5",
            "foo-T1",
        ] {
            assert!(bad.parse::<Arm>().is_err(), "{bad}");
        }
        for name in INIT_ARMS.iter().chain(&TRACKING_ARMS).chain(&GRADIENT_ARMS) {
            assert!(name.parse::<Arm>().is_ok(), "{name}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        let c = GuidanceConfig {
            guided_steps: 6,
            ..GuidanceConfig::default()
        };
        assert!(c.validate().is_err());
        let c = GuidanceConfig {
            tracking: TrackingMode::None,
            ..GuidanceConfig::default()
        };
        assert!(c.validate().is_err());
    }

    struct Fixture {
        data: Dataset,
        vae: VaeModel,
        latent: Denoiser,
        tracker: TrackerConfig,
    }

    fn fixture() -> Fixture {
        let data = generate_dataset(&DataConfig {
            train_sequences: 3,
            test_sequences: 2,
            frames: 36,
            feature_dim: 8,
            ..DataConfig::default()
        })
        .unwrap();
        let (vae, _) = train_vae(
            &data,
            &VaeConfig {
                epochs: 1,
                hidden: 8,
                decoder_hidden: 8,
                latent_dim: 4,
                ..VaeConfig::default()
            },
        )
        .unwrap();
        let latent = Denoiser::new(
            DenoiserArch {
                state_dim: vae.arch.state_dim(),
                cond_dim: condition_dim(8, data.skeleton.joint_count()),
                hidden: 8,
                rnn_hidden: 8,
            },
            NoiseSpec {
                init: InitMode::Latent,
                beta_start: 0.01,
                beta_end: 0.5,
            },
            5,
        )
        .unwrap();
        Fixture {
            data,
            vae,
            latent,
            tracker: TrackerConfig::default(),
        }
    }

    fn run(fx: &Fixture, arm: &str, tracker: bool, seed: u64) -> CaptureOutput {
        let pipe = Pipeline {
            vae: &fx.vae,
            skeleton: &fx.data.skeleton,
            denoiser: Some(&fx.latent),
            tracker: tracker.then_some(&fx.tracker),
        };
        let s = &fx.data.samples[0];
        let arm: Arm = arm.parse().unwrap();
        capture(
            &pipe,
            &s.observations,
            &fx.data.camera,
            s.motion.fps,
            &arm.config,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn capture_paths() {
        let fx = fixture();

        let plain = run(&fx, "latent-T5", false, 7);
        assert!(plain.track.is_none());
        assert_eq!(plain.diagnostics.steps.len(), 5);
        assert_eq!(plain, run(&fx, "latent-T5", false, 7));
        assert_ne!(plain.motion, run(&fx, "latent-T5", false, 8).motion);

        let no_guidance = run(&fx, "guided-s0-T5", true, 7);
        assert_eq!(no_guidance.motion, plain.motion);
        assert!(no_guidance.track.is_some());

        let guided = run(&fx, "guided-s3-T5", true, 7);
        let flags: Vec<bool> = guided
            .diagnostics
            .steps
            .iter()
            .map(|r| r.guided || r.fallback)
            .collect();
        assert_eq!(flags, vec![false, false, true, true, true]);
        assert_eq!(guided, run(&fx, "guided-s3-T5", true, 7));
        assert_ne!(guided.motion, plain.motion);

        let t0 = run(&fx, "latent-T0", false, 7);
        assert!(t0.diagnostics.steps.is_empty());
        let posthoc = run(&fx, "posthoc-T0", true, 7);
        assert_eq!(
            posthoc.motion,
            posthoc.track.as_ref().unwrap().motion.orthonormalized()
        );

        let pipe = Pipeline {
            vae: &fx.vae,
            skeleton: &fx.data.skeleton,
            denoiser: Some(&fx.latent),
            tracker: None,
        };
        let s = &fx.data.samples[0];
        let std_arm: Arm = "standard-T5".parse().unwrap();
        assert!(capture(
            &pipe,
            &s.observations,
            &fx.data.camera,
            s.motion.fps,
            &std_arm.config,
            0
        )
        .is_err());
        let posthoc_arm: Arm = "posthoc-T0".parse().unwrap();
        assert!(capture(
            &pipe,
            &s.observations,
            &fx.data.camera,
            s.motion.fps,
            &posthoc_arm.config,
            0
        )
        .is_err());
    }

    #[test]
    fn ablation_skips_missing_models() {
        let fx = fixture();
        let samples: Vec<&Sample> = fx.data.split(crate::synth::dataset::Split::Test).collect();
        let models = Models {
            vae: &fx.vae,
            skeleton: &fx.data.skeleton,
            latent: Some(&fx.latent),
            standard: None,
            tracker: Some(&fx.tracker),
        };
        let arms: Vec<Arm> = ["latent-T0", "standard-T1", "guided-s1-T2"]
            .iter()
            .map(|a| a.parse().unwrap())
            .collect();
        let rows = ablate(
            &samples,
            &fx.data.skeleton,
            &fx.data.camera,
            &models,
            &arms,
            3,
        )
        .unwrap();
        assert_eq!(
            rows.iter().map(|r| r.arm.as_str()).collect::<Vec<_>>(),
            vec!["latent-T0", "guided-s1-T2"]
        );
        for r in &rows {
            assert_eq!(r.sequences, 2);
            let s = r.metrics.success_rate.unwrap();
            assert!((0.0..=1.0).contains(&s));
            assert!(r.metrics.pa_mpjpe <= r.metrics.mpjpe + 1e-9);
        }
        assert_eq!(
            rows,
            ablate(
                &samples,
                &fx.data.skeleton,
                &fx.data.camera,
                &models,
                &arms,
                3
            )
            .unwrap()
        );
    }
}
