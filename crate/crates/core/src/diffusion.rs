//! Shifted-noise diffusion over normalized motion states.
//!
//! The forward process draws its noise from a per-frame gaussian `N(m, s^2)`
//! in state space instead of `N(0, I)`; with `m = 0, s = 1` everything below
//! reduces to the usual x0-parametrized process.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    build_condition, condition_dim, guided_step, GradientScale, GuideContext, InitMode,
};
use crate::nn::{stack_frames, unstack_frames, AdamConfig};
use crate::nn::{Bind, Dense, Mat, Mlp, MlpSpec, ParamStore, SeqEncoder, Tape, Var};
use crate::ops::{fk_batch, reprojection_loss};
use crate::synth::dataset::Split;
use crate::synth::{Dataset, Sample};
use crate::tracker::{build_character, Character, TrackerConfig};
use crate::vae::{reparam_sample, shuffled_batches, LatentGaussianSeq, VaeModel};

/// Linear beta table with its derived products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// `betas[t - 1]` is beta_t.
    pub betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if !(1..=1000).contains(&steps) {
        return Err(Error::Invalid(format!(
            "diffusion steps must be in 1..=1000, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let last = *alpha_bars.last().expect("nonempty");
        alpha_bars.push(last * (1.0 - b));
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

/// Per-frame, per-channel gaussian the forward process draws noise from.
#[derive(Clone, Debug, PartialEq)]
pub struct StateNoise {
    pub mean: Mat,
    pub std: Mat,
}

impl StateNoise {
    pub fn standard(frames: usize, dim: usize) -> StateNoise {
        StateNoise {
            mean: Mat::zeros(frames, dim),
            std: Mat::from_element(frames, dim, 1.0),
        }
    }

    fn check(&self, x: &Mat) -> Result<()> {
        if self.mean.shape() != x.shape() || self.std.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "noise parameters {:?} do not match state {:?}",
                self.mean.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Mat {
        Mat::from_fn(self.mean.nrows(), self.mean.ncols(), |r, c| {
            let e: f64 = StandardNormal.sample(rng);
            self.mean[(r, c)] + self.std[(r, c)] * e
        })
    }
}

/// Noise parameters in normalized state space from encoded latents: the mean
/// is the decoded latent mean, the std the spread of `samples` decoded draws.
pub fn latent_state_noise(
    vae: &VaeModel,
    dists: &LatentGaussianSeq,
    samples: usize,
    floor: f64,
    seed: u64,
) -> Result<StateNoise> {
    if samples < 2 {
        return Err(Error::Invalid(
            "need at least two draws to estimate the noise spread".into(),
        ));
    }
    let stats = vae.stats();
    let (mean_state, _) = vae.decode_state(&dists.mu)?;
    let mean = stats.normalize(&mean_state);
    let mut sum = Mat::zeros(mean.nrows(), mean.ncols());
    let mut sq = Mat::zeros(mean.nrows(), mean.ncols());
    for k in 0..samples {
        let z = reparam_sample(dists, seed.wrapping_add(k as u64));
        let (s, _) = vae.decode_state(&z)?;
        let u = stats.normalize(&s);
        sum += &u;
        sq += u.component_mul(&u);
    }
    let n = samples as f64;
    let std = Mat::from_fn(mean.nrows(), mean.ncols(), |r, c| {
        let m = sum[(r, c)] / n;
        ((sq[(r, c)] / n - m * m).max(0.0) * n / (n - 1.0))
            .sqrt()
            .max(floor)
    });
    Ok(StateNoise { mean, std })
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) (m + s * eps)`.
pub fn forward_diffuse(
    schedule: &DiffusionSchedule,
    x0: &Mat,
    t: usize,
    noise: &StateNoise,
    seed: u64,
) -> Result<Mat> {
    schedule.check_step(t)?;
    noise.check(x0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = schedule.alpha_bar(t);
    let e = noise.sample(&mut rng);
    Ok(x0 * a.sqrt() + e * (1.0 - a).sqrt())
}

/// One ancestral step from `x_t` given the clean estimate `x0_hat`: remove
/// the noise-mean offset, take the standard posterior, restore the offset
/// at level `t - 1`, and (if `stochastic`) add `sqrt(beta_tilde_t) s * eps`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    schedule: &DiffusionSchedule,
    x_t: &Mat,
    x0_hat: &Mat,
    t: usize,
    noise: &StateNoise,
    seed: u64,
    stochastic: bool,
) -> Result<Mat> {
    schedule.check_step(t)?;
    noise.check(x_t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape(
            "clean estimate and state differ in shape".into(),
        ));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let y = x_t - &noise.mean * (1.0 - ab).sqrt();
    let mut out = x0_hat * c0 + y * ct + &noise.mean * (1.0 - ab_prev).sqrt();
    let var = schedule.beta_tilde(t);
    if stochastic && var > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = var.sqrt();
        for (o, s) in out.iter_mut().zip(noise.std.iter()) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *o += sd * s * e;
        }
    }
    Ok(out)
}

/// Motion estimate at level `t` with the noise assumed equal to its mean.
pub fn mean_shift_estimate(
    schedule: &DiffusionSchedule,
    x_t: &Mat,
    t: usize,
    noise: &StateNoise,
) -> Mat {
    let ab = schedule.alpha_bar(t);
    (x_t - &noise.mean * (1.0 - ab).sqrt()) / ab.sqrt()
}

/// Inverse of [`mean_shift_estimate`]: place a clean motion at level `t`.
pub fn place_at_level(schedule: &DiffusionSchedule, x0: &Mat, t: usize, noise: &StateNoise) -> Mat {
    let ab = schedule.alpha_bar(t);
    x0 * ab.sqrt() + &noise.mean * (1.0 - ab).sqrt()
}

pub const TIME_FEATURES: usize = 3;

/// Noise-level features of step `t`, shared by every schedule length.
pub fn time_embedding(schedule: &DiffusionSchedule, t: usize) -> [f64; TIME_FEATURES] {
    let ab = schedule.alpha_bar(t);
    let log_snr = (ab / (1.0 - ab)).ln();
    [ab.sqrt(), (1.0 - ab).sqrt(), 0.1 * log_snr]
}

/// Noise setup a denoiser was trained under; sampling must use the same.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub init: InitMode,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub rnn_hidden: usize,
}

impl DenoiserArch {
    pub fn input_dim(&self) -> usize {
        self.state_dim + TIME_FEATURES + self.cond_dim
    }
}

/// Network predicting the clean normalized state from a noisy one, the noise
/// level and a per-frame condition.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub noise: NoiseSpec,
    pub store: ParamStore,
    input: Dense,
    rnn: SeqEncoder,
    head: Mlp,
    skip: Dense,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, noise: NoiseSpec, seed: u64) -> Result<Denoiser> {
        if arch.state_dim == 0 || arch.hidden == 0 || arch.rnn_hidden == 0 {
            return Err(Error::Invalid("denoiser sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = Dense::new(
            &mut store,
            "denoiser.input",
            arch.input_dim(),
            arch.hidden,
            &mut rng,
        );
        let rnn = SeqEncoder::new(
            &mut store,
            "denoiser.rnn",
            arch.hidden,
            arch.rnn_hidden,
            true,
            &mut rng,
        );
        let head = Mlp::new(
            &mut store,
            "denoiser.head",
            MlpSpec::new(vec![
                rnn.out_dim() + arch.input_dim(),
                arch.hidden,
                arch.state_dim,
            ]),
            &mut rng,
        )?;
        let skip = Dense::new(
            &mut store,
            "denoiser.skip",
            arch.state_dim,
            arch.state_dim,
            &mut rng,
        );
        Ok(Denoiser {
            arch,
            noise,
            store,
            input,
            rnn,
            head,
            skip,
        })
    }

    pub fn from_store(store: ParamStore, meta: &BTreeMap<String, String>) -> Result<Denoiser> {
        let arch: DenoiserArch = serde_json::from_str(
            meta.get("denoiser_arch")
                .ok_or_else(|| Error::Invalid("checkpoint lacks 'denoiser_arch'".into()))?,
        )?;
        let noise: NoiseSpec = serde_json::from_str(
            meta.get("denoiser_noise")
                .ok_or_else(|| Error::Invalid("checkpoint lacks 'denoiser_noise'".into()))?,
        )?;
        let mut model = Denoiser::new(arch, noise, 0)?;
        model.store.assign_from(&store)?;
        Ok(model)
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert(
            "denoiser_arch".into(),
            serde_json::to_string(&self.arch).expect("plain struct"),
        );
        m.insert(
            "denoiser_noise".into(),
            serde_json::to_string(&self.noise).expect("plain struct"),
        );
        m
    }

    /// Frame-major batched prediction; `inputs` is `[x_t | time | condition]`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bind: Bind,
        inputs: Var,
        batch: usize,
    ) -> Result<Var> {
        let cols = tape.value(inputs).ncols();
        if cols != self.arch.input_dim() {
            return Err(Error::Shape(format!(
                "denoiser expects {} input columns, got {cols}",
                self.arch.input_dim()
            )));
        }
        let a = self.input.forward(tape, bind, inputs);
        let a = tape.tanh(a);
        let h = self.rnn.forward_batch(tape, bind, a, batch)?;
        let hx = tape.concat_cols(&[h, inputs]);
        let y = self.head.forward(tape, bind, hx)?;
        let x = tape.slice_cols(inputs, 0, self.arch.state_dim);
        let s = self.skip.forward(tape, bind, x);
        Ok(tape.add(y, s))
    }

    pub fn schedule(&self, steps: usize) -> Result<DiffusionSchedule> {
        make_schedule(steps, self.noise.beta_start, self.noise.beta_end)
    }

    /// Clean-state estimate for one sequence.
    pub fn predict(&self, x_t: &Mat, time: &[f64; TIME_FEATURES], condition: &Mat) -> Result<Mat> {
        let inputs = assemble_inputs(x_t, time, condition, self.arch.cond_dim)?;
        let mut tape = Tape::new();
        let iv = tape.constant(inputs);
        let y = self.forward_vars(&mut tape, Bind::frozen(&self.store), iv, 1)?;
        Ok(tape.value(y).clone())
    }

    /// [`Denoiser::predict`] at level `t` of `schedule`.
    pub fn denoise(
        &self,
        schedule: &DiffusionSchedule,
        x_t: &Mat,
        t: usize,
        condition: &Mat,
    ) -> Result<Mat> {
        self.predict(x_t, &time_embedding(schedule, t), condition)
    }
}

/// Per-frame `[x_t | time | condition]` rows.
pub fn assemble_inputs(
    x_t: &Mat,
    time: &[f64; TIME_FEATURES],
    condition: &Mat,
    cond_dim: usize,
) -> Result<Mat> {
    if condition.nrows() != x_t.nrows() || condition.ncols() != cond_dim {
        return Err(Error::Shape(format!(
            "condition is {:?}, expected {} x {cond_dim}",
            condition.shape(),
            x_t.nrows()
        )));
    }
    let d = x_t.ncols();
    Ok(Mat::from_fn(
        x_t.nrows(),
        d + TIME_FEATURES + cond_dim,
        |r, c| {
            if c < d {
                x_t[(r, c)]
            } else if c < d + TIME_FEATURES {
                time[c - d]
            } else {
                condition[(r, c - d - TIME_FEATURES)]
            }
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionWeights {
    pub diff: f64,
    pub joint: f64,
    pub reproj: f64,
}

impl Default for DiffusionWeights {
    fn default() -> Self {
        DiffusionWeights {
            diff: 1.0,
            joint: 1.0,
            reproj: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub init: InitMode,
    /// Schedule lengths T sampled during training; one network serves all.
    pub train_steps: Vec<usize>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub rnn_hidden: usize,
    /// Probability that a training example runs the tracker and carries
    /// gradient channels.
    pub p_phys: f64,
    /// Build tracked training inputs from posterior samples instead of the
    /// ground truth, so they carry estimate-like errors.
    pub guide_from_posterior: bool,
    pub noise_samples: usize,
    pub noise_floor: f64,
    pub gradient_scale: GradientScale,
    pub weights: DiffusionWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            init: InitMode::Latent,
            train_steps: vec![1, 5, 7, 10, 50],
            beta_start: 0.01,
            beta_end: 0.5,
            hidden: 64,
            rnn_hidden: 64,
            p_phys: 0.5,
            guide_from_posterior: true,
            noise_samples: 16,
            noise_floor: 1e-3,
            gradient_scale: GradientScale::UnitRms,
            weights: DiffusionWeights::default(),
            lr: 3e-3,
            epochs: 40,
            batch_size: 8,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps.is_empty() {
            return Err(Error::Invalid(
                "diffusion.train_steps must not be empty".into(),
            ));
        }
        for &t in &self.train_steps {
            make_schedule(t, self.beta_start, self.beta_end)?;
        }
        if self.hidden == 0 || self.rnn_hidden == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("diffusion sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_phys) {
            return Err(Error::Invalid(format!(
                "diffusion.p_phys = {} is not a probability",
                self.p_phys
            )));
        }
        if self.noise_samples < 2 || !(self.noise_floor > 0.0) {
            return Err(Error::Invalid(
                "diffusion needs at least two noise draws and a positive floor".into(),
            ));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Invalid(
                "diffusion.lr and diffusion.clip_norm must be positive".into(),
            ));
        }
        let w = &self.weights;
        if [w.diff, w.joint, w.reproj].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(
                "diffusion loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            init: self.init,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

/// Per-batch means of the weighted loss terms (unweighted values).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLoss {
    pub diff: f64,
    pub joint: f64,
    pub reproj: f64,
    pub total: f64,
    /// Fraction of examples that carried tracked inputs.
    pub guided: f64,
    /// Clean-state error per guided and per unguided example.
    pub diff_guided: f64,
    pub diff_unguided: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainLog {
    pub epochs: Vec<DiffusionLoss>,
}

/// One training example, ready for batching.
pub struct Example {
    pub input: Mat,
    pub target: Mat,
    pub guided: bool,
}

/// Tracking setup for a guided training example.
pub struct GuideSource<'a> {
    pub character: &'a Character,
    pub camera: &'a crate::motion::Camera,
    /// Track a motion built from a posterior sample rather than from the
    /// ground truth.
    pub from_posterior: bool,
}

/// Noised (and possibly tracked) input for one sequence.
#[allow(clippy::too_many_arguments)]
pub fn make_example(
    vae: &VaeModel,
    sample: &Sample,
    dists: &LatentGaussianSeq,
    noise: &StateNoise,
    guide: Option<&GuideSource>,
    schedule: &DiffusionSchedule,
    t: usize,
    scale: GradientScale,
    cond_dim: usize,
    seed: u64,
) -> Result<Example> {
    let stats = vae.stats();
    let target = stats.normalize(&sample.motion.to_state());
    let time = time_embedding(schedule, t);
    let embedding = sample.observations.feature_matrix();
    let grad_dim = cond_dim - embedding.ncols() - 1;
    if let Some(src) = guide {
        let start = if src.from_posterior {
            stats.normalize(&vae.decode_state(&reparam_sample(dists, seed ^ 0x7e57))?.0)
        } else {
            target.clone()
        };
        let x_t = forward_diffuse(schedule, &start, t, noise, seed)?;
        let ctx = GuideContext {
            stats: &stats,
            character: src.character,
            camera: src.camera,
            keypoints: sample.observations.keypoint_matrix(),
            confidence: sample.observations.confidence_matrix(),
            embedding: embedding.clone(),
            fps: sample.motion.fps,
        };
        if let Some(g) = guided_step(&ctx, schedule, &x_t, t, noise, true, scale)? {
            return Ok(Example {
                input: assemble_inputs(&g.input, &time, &g.condition, cond_dim)?,
                target,
                guided: true,
            });
        }
    }
    let x_t = forward_diffuse(schedule, &target, t, noise, seed)?;
    let cond = build_condition(&embedding, &Mat::zeros(dists.len(), grad_dim), false, scale)?;
    Ok(Example {
        input: assemble_inputs(&x_t, &time, &cond, cond_dim)?,
        target,
        guided: false,
    })
}

/// Weighted clean-state, joint-position and reprojection loss of a
/// frame-major batch of predictions.
pub fn diffusion_loss(
    tape: &mut Tape,
    vae: &VaeModel,
    pred: Var,
    targets: &Mat,
    batch: &[&Sample],
    base: &crate::motion::Skeleton,
    camera: &crate::motion::Camera,
    w: &DiffusionWeights,
) -> Result<(Var, DiffusionLoss)> {
    if tape.value(pred).shape() != targets.shape() {
        return Err(Error::Shape("predictions do not match targets".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let gt = tape.constant(targets.clone());
    let err = tape.sub(pred, gt);
    let l_diff = tape.sum_sq(err);

    let stats = vae.stats();
    let d = stats.scale.len();
    let scale = tape.constant(Mat::from_fn(d, d, |r, c| {
        if r == c {
            stats.scale[r]
        } else {
            0.0
        }
    }));
    let mean = tape.constant(Mat::from_row_slice(1, d, &stats.mean));
    let raw = tape.matmul(pred, scale);
    let raw = tape.add_row(raw, mean);
    let skeletons: Vec<crate::motion::Skeleton> = batch
        .iter()
        .map(|s| s.skeleton(base))
        .collect::<Result<_>>()?;
    let gt_states: Vec<Mat> = batch.iter().map(|s| s.motion.to_state()).collect();
    let gt_pos = crate::motion::state_positions_batch(
        &skeletons,
        &stack_frames(&gt_states.iter().collect::<Vec<_>>())?,
    );
    let pos = fk_batch(tape, &skeletons, raw);
    let gp = tape.constant(gt_pos);
    let dp = tape.sub(pos, gp);
    let l_joint = tape.sum_sq(dp);
    let kps: Vec<Mat> = batch
        .iter()
        .map(|s| s.observations.keypoint_matrix())
        .collect();
    let confs: Vec<Mat> = batch
        .iter()
        .map(|s| s.observations.confidence_matrix())
        .collect();
    let l_reproj = reprojection_loss(
        tape,
        camera,
        pos,
        &stack_frames(&kps.iter().collect::<Vec<_>>())?,
        &stack_frames(&confs.iter().collect::<Vec<_>>())?,
    );

    let a = tape.scale(l_diff, w.diff * inv_b);
    let b = tape.scale(l_joint, w.joint * inv_b);
    let c = tape.scale(l_reproj, w.reproj);
    let total = tape.add(a, b);
    let total = tape.add(total, c);
    let parts = DiffusionLoss {
        diff: tape.scalar(l_diff) * inv_b,
        joint: tape.scalar(l_joint) * inv_b,
        reproj: tape.scalar(l_reproj),
        total: tape.scalar(total),
        ..DiffusionLoss::default()
    };
    for (name, v) in [
        ("diff", parts.diff),
        ("joint", parts.joint),
        ("reproj", parts.reproj),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("diffusion loss term '{name}'")));
        }
    }
    Ok((total, parts))
}

/// Train a denoiser against a frozen VAE. With a tracker config, a
/// `p_phys` share of examples is tracked and carries gradient channels.
pub fn train_diffusion(
    dataset: &Dataset,
    vae: &VaeModel,
    tracker: Option<&TrackerConfig>,
    cfg: &DiffusionConfig,
) -> Result<(Denoiser, DiffusionTrainLog)> {
    cfg.validate()?;
    let train: Vec<&Sample> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let joints = dataset.skeleton.joint_count();
    let arch = DenoiserArch {
        state_dim: vae.arch.state_dim(),
        cond_dim: condition_dim(vae.arch.feature_dim, joints),
        hidden: cfg.hidden,
        rnn_hidden: cfg.rnn_hidden,
    };
    let mut model = Denoiser::new(arch.clone(), cfg.noise_spec(), cfg.seed)?;
    let schedules: Vec<DiffusionSchedule> = cfg
        .train_steps
        .iter()
        .map(|&t| model.schedule(t))
        .collect::<Result<_>>()?;

    let mut noises = Vec::with_capacity(train.len());
    let mut posteriors = Vec::with_capacity(train.len());
    let mut characters = Vec::with_capacity(train.len());
    for (i, s) in train.iter().enumerate() {
        let features = s.observations.feature_matrix();
        let dists = vae.encode(&features)?;
        noises.push(match cfg.init {
            InitMode::Latent => latent_state_noise(
                vae,
                &dists,
                cfg.noise_samples,
                cfg.noise_floor,
                cfg.seed ^ (i as u64) << 20,
            )?,
            InitMode::Standard => StateNoise::standard(features.nrows(), arch.state_dim),
        });
        posteriors.push(dists.clone());
        characters.push(match tracker {
            Some(tc) if cfg.p_phys > 0.0 => {
                let (_, beta) = vae.decode_state(&dists.mu)?;
                Some(build_character(&dataset.skeleton, &beta, tc)?)
            }
            _ => None,
        });
    }

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut log = DiffusionTrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut mean = DiffusionLoss::default();
        let batches = shuffled_batches(&train, cfg.batch_size, &mut rng);
        let mut examples_seen = 0usize;
        let mut guided_seen = 0usize;
        let mut sum_guided = 0.0;
        let mut sum_unguided = 0.0;
        for idx in &batches {
            let mut inputs = Vec::with_capacity(idx.len());
            let mut flags = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let schedule = &schedules[rng.random_range(0..schedules.len())];
                let t = rng.random_range(1..=schedule.steps());
                let guide = rng.random_bool(cfg.p_phys);
                let source = characters[i]
                    .as_ref()
                    .filter(|_| guide)
                    .map(|ch| GuideSource {
                        character: ch,
                        camera: &dataset.camera,
                        from_posterior: cfg.guide_from_posterior,
                    });
                let ex = make_example(
                    vae,
                    train[i],
                    &posteriors[i],
                    &noises[i],
                    source.as_ref(),
                    schedule,
                    t,
                    cfg.gradient_scale,
                    arch.cond_dim,
                    rng.random(),
                )?;
                guided_seen += ex.guided as usize;
                flags.push(ex.guided);
                inputs.push(ex.input);
                targets.push(ex.target);
            }
            examples_seen += idx.len();
            let samples: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let input = stack_frames(&inputs.iter().collect::<Vec<_>>())?;
            let target = stack_frames(&targets.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let iv = tape.constant(input);
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    checkpoint: None,
                },
                other => other,
            };
            let pred = model.forward_vars(&mut tape, Bind::train(&model.store), iv, idx.len())?;
            let (total, parts) = diffusion_loss(
                &mut tape,
                vae,
                pred,
                &target,
                &samples,
                &dataset.skeleton,
                &dataset.camera,
                &cfg.weights,
            )
            .map_err(diverged)?;
            for (b, err) in unstack_frames(&(tape.value(pred) - &target), idx.len())
                .iter()
                .enumerate()
            {
                if flags[b] {
                    sum_guided += err.norm_squared();
                } else {
                    sum_unguided += err.norm_squared();
                }
            }
            let mut grads = tape.backward(total)?;
            grads.clip_norm(cfg.clip_norm);
            model.store.adam_step(&grads, &adam).map_err(diverged)?;
            let k = 1.0 / batches.len() as f64;
            mean.diff += k * parts.diff;
            mean.joint += k * parts.joint;
            mean.reproj += k * parts.reproj;
            mean.total += k * parts.total;
        }
        mean.guided = guided_seen as f64 / examples_seen.max(1) as f64;
        mean.diff_guided = sum_guided / guided_seen.max(1) as f64;
        mean.diff_unguided = sum_unguided / (examples_seen - guided_seen).max(1) as f64;
        log::info!(
            "diffusion epoch {epoch}: total {:.4} diff {:.4} (guided {:.3}, unguided {:.3}) joint {:.4} reproj {:.1} guided share {:.2}",
            mean.total,
            mean.diff,
            mean.diff_guided,
            mean.diff_unguided,
            mean.joint,
            mean.reproj,
            mean.guided
        );
        log.epochs.push(mean);
    }
    Ok((model, log))
}
