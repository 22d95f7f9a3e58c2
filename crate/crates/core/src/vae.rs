//! Recurrent VAE mapping observation features to per-frame latent gaussians
//! and latents back to motion, root translation and per-limb shape.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Camera, Motion, Skeleton};
use crate::nn::{
    pooling_matrix, stack_frames, AdamConfig, Bind, Dense, Mat, Mlp, MlpSpec, ParamStore,
    SeqEncoder, Tape, Var,
};
use crate::ops::{fk_batch, reprojection_loss};
use crate::synth::dataset::{Dataset, Sample, Split};

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Relative weights of the five VAE loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub motion: f64,
    pub shape: f64,
    pub joint: f64,
    pub reproj: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            motion: 1.0,
            shape: 1.0,
            joint: 1.0,
            reproj: 1e-4,
            kl: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub bidirectional: bool,
    pub weights: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 32,
            hidden: 64,
            decoder_hidden: 64,
            bidirectional: true,
            weights: LossWeights::default(),
            lr: 3e-3,
            epochs: 60,
            batch_size: 8,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if self.latent_dim == 0
            || self.hidden == 0
            || self.decoder_hidden == 0
            || self.batch_size == 0
        {
            return Err(Error::Invalid("VAE sizes must be positive".into()));
        }
        if [w.motion, w.shape, w.joint, w.reproj, w.kl]
            .iter()
            .any(|x| !(*x >= 0.0))
        {
            return Err(Error::Invalid(
                "VAE loss weights must be non-negative".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid(
                "learning rate and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sizes needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub feature_dim: usize,
    pub joints: usize,
    pub limbs: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub bidirectional: bool,
}

impl VaeArch {
    pub fn state_dim(&self) -> usize {
        6 * self.joints + 3
    }
}

/// Per-frame latent gaussians `N(mu_h, diag(sigma_h^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussianSeq {
    pub mu: Mat,
    pub sigma: Mat,
}

impl LatentGaussianSeq {
    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.shape() != self.sigma.shape() {
            return Err(Error::Shape("latent mean and std differ in shape".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::NonFinite("latent distribution".into()));
        }
        Ok(())
    }
}

/// Per-channel affine normalization of state rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StateStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StateStats {
    /// Channel mean and standard deviation over all frames, std floored at `floor`.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a Mat>, floor: f64) -> Result<StateStats> {
        let mut n = 0.0;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in states {
            if sum.is_empty() {
                sum = vec![0.0; m.ncols()];
                sq = vec![0.0; m.ncols()];
            }
            if m.ncols() != sum.len() {
                return Err(Error::Shape("state widths differ".into()));
            }
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    sum[c] += m[(r, c)];
                    sq[c] += m[(r, c)] * m[(r, c)];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::Invalid("no frames to fit state statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(floor))
            .collect();
        Ok(StateStats { mean, scale })
    }

    pub fn normalize(&self, m: &Mat) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |r, c| {
            (m[(r, c)] - self.mean[c]) / self.scale[c]
        })
    }

    pub fn denormalize(&self, m: &Mat) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |r, c| {
            m[(r, c)] * self.scale[c] + self.mean[c]
        })
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub store: ParamStore,
    encoder: SeqEncoder,
    mu_head: Dense,
    log_sigma_head: Dense,
    decoder: Mlp,
    shape_head: Dense,
    state_mean: usize,
    state_scale: usize,
}

/// Loss terms of one batch, each averaged over its sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub motion: f64,
    pub shape: f64,
    pub joint: f64,
    pub reproj: f64,
    pub kl: f64,
    pub total: f64,
}

impl VaeLoss {
    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("L_motion", self.motion),
            ("L_shape", self.shape),
            ("L_joint", self.joint),
            ("L_reproj", self.reproj),
            ("L_kl", self.kl),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("VAE loss component {name}")));
            }
        }
        Ok(())
    }

    fn add_scaled(&mut self, o: &VaeLoss, w: f64) {
        self.motion += w * o.motion;
        self.shape += w * o.shape;
        self.joint += w * o.joint;
        self.reproj += w * o.reproj;
        self.kl += w * o.kl;
        self.total += w * o.total;
    }
}

/// Ground truth for a frame-major batch.
pub struct Targets<'a> {
    pub batch: usize,
    pub states: Mat,
    pub betas: Mat,
    pub skeletons: Vec<Skeleton>,
    pub keypoints: Mat,
    pub confidence: Mat,
    pub camera: &'a Camera,
}

impl<'a> Targets<'a> {
    pub fn from_samples(
        samples: &[&Sample],
        base: &Skeleton,
        camera: &'a Camera,
    ) -> Result<Targets<'a>> {
        let states: Vec<Mat> = samples.iter().map(|s| s.motion.to_state()).collect();
        let kps: Vec<Mat> = samples
            .iter()
            .map(|s| s.observations.keypoint_matrix())
            .collect();
        let confs: Vec<Mat> = samples
            .iter()
            .map(|s| s.observations.confidence_matrix())
            .collect();
        let limbs = base.limb_count();
        Ok(Targets {
            batch: samples.len(),
            states: stack_frames(&states.iter().collect::<Vec<_>>())?,
            betas: Mat::from_fn(samples.len(), limbs, |b, l| samples[b].beta[l]),
            skeletons: samples
                .iter()
                .map(|s| s.skeleton(base))
                .collect::<Result<_>>()?,
            keypoints: stack_frames(&kps.iter().collect::<Vec<_>>())?,
            confidence: stack_frames(&confs.iter().collect::<Vec<_>>())?,
            camera,
        })
    }
}

/// Weighted five-term loss from decoded states/shapes and latent parameters.
pub fn vae_terms(
    tape: &mut Tape,
    pred: Var,
    beta: Var,
    mu: Var,
    log_sigma: Var,
    t: &Targets,
    w: &LossWeights,
) -> Result<(Var, VaeLoss)> {
    if tape.value(pred).shape() != t.states.shape() {
        return Err(Error::Shape("decoded states do not match targets".into()));
    }
    let inv_b = 1.0 / t.batch as f64;
    let gt = tape.constant(t.states.clone());
    let d = tape.sub(pred, gt);
    let l_motion = tape.sum_sq(d);

    let gb = tape.constant(t.betas.clone());
    let db = tape.sub(beta, gb);
    let l_shape = tape.sum_sq(db);

    let gt_pos = crate::motion::state_positions_batch(&t.skeletons, &t.states);
    let pos = fk_batch(tape, &t.skeletons, pred);
    let gp = tape.constant(gt_pos);
    let dp = tape.sub(pos, gp);
    let l_joint = tape.sum_sq(dp);

    // mean over all rows is the batch mean of the per-sequence (1/H) sums
    let l_reproj = reprojection_loss(tape, t.camera, pos, &t.keypoints, &t.confidence);

    let n = tape.value(mu).len() as f64;
    let mu_sq = tape.sum_sq(mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let var_sum = tape.sum(var);
    let ls_sum = tape.sum(log_sigma);
    let ls2 = tape.scale(ls_sum, -2.0);
    let a = tape.add(mu_sq, var_sum);
    let a = tape.add(a, ls2);
    let a = tape.add_const(a, -n);
    let l_kl = tape.scale(a, 0.5);

    let parts = [
        (l_motion, w.motion * inv_b),
        (l_shape, w.shape * inv_b),
        (l_joint, w.joint * inv_b),
        (l_reproj, w.reproj),
        (l_kl, w.kl * inv_b),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for (v, c) in &parts[1..] {
        let s = tape.scale(*v, *c);
        total = tape.add(total, s);
    }
    let loss = VaeLoss {
        motion: tape.scalar(l_motion) * inv_b,
        shape: tape.scalar(l_shape) * inv_b,
        joint: tape.scalar(l_joint) * inv_b,
        reproj: tape.scalar(l_reproj),
        kl: tape.scalar(l_kl) * inv_b,
        total: tape.scalar(total),
    };
    loss.check()?;
    Ok((total, loss))
}

impl VaeModel {
    pub fn new(arch: VaeArch, stats: &StateStats, seed: u64) -> Result<VaeModel> {
        if stats.mean.len() != arch.state_dim() {
            return Err(Error::Shape(format!(
                "state statistics have {} channels, skeleton needs {}",
                stats.mean.len(),
                arch.state_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SeqEncoder::new(
            &mut store,
            "encoder.rnn",
            arch.feature_dim,
            arch.hidden,
            arch.bidirectional,
            &mut rng,
        );
        let mu_head = Dense::new(
            &mut store,
            "encoder.mu",
            encoder.out_dim(),
            arch.latent_dim,
            &mut rng,
        );
        let log_sigma_head = Dense::new(
            &mut store,
            "encoder.log_sigma",
            encoder.out_dim(),
            arch.latent_dim,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "decoder.motion",
            MlpSpec::new(vec![
                arch.latent_dim,
                arch.decoder_hidden,
                arch.decoder_hidden,
                arch.state_dim(),
            ]),
            &mut rng,
        )?;
        let shape_head = Dense::new(
            &mut store,
            "decoder.shape",
            arch.latent_dim,
            arch.limbs,
            &mut rng,
        );
        let state_mean = store.insert(
            "decoder.state_mean",
            Mat::from_row_slice(1, stats.mean.len(), &stats.mean),
        );
        let state_scale = store.insert(
            "decoder.state_scale",
            Mat::from_diagonal(&nalgebra::DVector::from_vec(stats.scale.clone())),
        );
        Ok(VaeModel {
            arch,
            store,
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
            shape_head,
            state_mean,
            state_scale,
        })
    }

    /// Rebuild from checkpointed parameters and metadata.
    pub fn from_store(store: ParamStore, meta: &BTreeMap<String, String>) -> Result<VaeModel> {
        let arch: VaeArch = serde_json::from_str(
            meta.get("vae_arch")
                .ok_or_else(|| Error::Invalid("checkpoint lacks 'vae_arch'".into()))?,
        )?;
        let d = arch.state_dim();
        let stats = StateStats {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        };
        let mut model = VaeModel::new(arch, &stats, 0)?;
        model.store.assign_from(&store)?;
        Ok(model)
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert(
            "vae_arch".into(),
            serde_json::to_string(&self.arch).expect("plain struct"),
        );
        m
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .iter()
            .filter(|n| n.starts_with("encoder."))
            .cloned()
            .collect()
    }

    pub fn stats(&self) -> StateStats {
        let scale = self.store.value(self.state_scale);
        StateStats {
            mean: self.store.value(self.state_mean).iter().copied().collect(),
            scale: (0..scale.nrows()).map(|i| scale[(i, i)]).collect(),
        }
    }

    /// `(mu, log_sigma)` for frame-major batched features.
    pub fn encode_vars(
        &self,
        tape: &mut Tape,
        bind: Bind,
        features: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let cols = tape.value(features).ncols();
        if cols != self.arch.feature_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} features, got {cols}",
                self.arch.feature_dim
            )));
        }
        let h = self.encoder.forward_batch(tape, bind, features, batch)?;
        let mu = self.mu_head.forward(tape, bind, h);
        let ls = self.log_sigma_head.forward(tape, bind, h);
        let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        Ok((mu, ls))
    }

    /// Decoded states and per-sequence shapes for frame-major batched latents.
    pub fn decode_vars(
        &self,
        tape: &mut Tape,
        bind: Bind,
        z: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let (rows, cols) = tape.value(z).shape();
        if cols != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} latents, got {cols}",
                self.arch.latent_dim
            )));
        }
        let y = self.decoder.forward(tape, bind, z)?;
        let scale = tape.frozen(&self.store, self.state_scale);
        let mean = tape.frozen(&self.store, self.state_mean);
        let y = tape.matmul(y, scale);
        let state = tape.add_row(y, mean);
        let pool = tape.constant(pooling_matrix(rows / batch, batch));
        let pooled = tape.matmul(pool, z);
        let log_beta = self.shape_head.forward(tape, bind, pooled);
        let beta = tape.exp(log_beta);
        Ok((state, beta))
    }

    pub fn encode(&self, features: &Mat) -> Result<LatentGaussianSeq> {
        if features.nrows() == 0 {
            return Err(Error::Shape(
                "cannot encode an empty feature sequence".into(),
            ));
        }
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let (mu, ls) = self.encode_vars(&mut tape, Bind::frozen(&self.store), f, 1)?;
        let d = LatentGaussianSeq {
            mu: tape.value(mu).clone(),
            sigma: tape.value(ls).map(f64::exp),
        };
        d.validate()?;
        Ok(d)
    }

    /// `H x (6J+3)` state matrix and per-limb scales.
    pub fn decode_state(&self, z: &Mat) -> Result<(Mat, Vec<f64>)> {
        if z.nrows() == 0 {
            return Err(Error::Shape(
                "cannot decode an empty latent sequence".into(),
            ));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (s, b) = self.decode_vars(&mut tape, Bind::frozen(&self.store), zv, 1)?;
        Ok((
            tape.value(s).clone(),
            tape.value(b).iter().copied().collect(),
        ))
    }

    pub fn decode(&self, z: &Mat, fps: f64) -> Result<(Motion, Vec<f64>)> {
        let (s, beta) = self.decode_state(z)?;
        Ok((Motion::from_state(&s, fps)?, beta))
    }

    /// Loss of a batch of equal-length samples with reparameterization noise `eps`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bind: Bind,
        targets: &Targets,
        features: &Mat,
        eps: &Mat,
        w: &LossWeights,
    ) -> Result<(Var, VaeLoss)> {
        let f = tape.constant(features.clone());
        let (mu, ls) = self.encode_vars(tape, bind, f, targets.batch)?;
        if tape.value(mu).shape() != eps.shape() {
            return Err(Error::Shape(
                "reparameterization noise has the wrong shape".into(),
            ));
        }
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let se = tape.mul(sigma, e);
        let z = tape.add(mu, se);
        let (state, beta) = self.decode_vars(tape, bind, z, targets.batch)?;
        vae_terms(tape, state, beta, mu, ls, targets, w)
    }
}

/// `z_h = mu_h + sigma_h * eps`, `eps ~ N(0, I)` drawn from `seed`.
pub fn reparam_sample(dists: &LatentGaussianSeq, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Mat::from_fn(dists.mu.nrows(), dists.mu.ncols(), |_, _| {
        StandardNormal.sample(&mut rng)
    });
    &dists.mu + dists.sigma.component_mul(&eps)
}

/// KL divergence of diagonal gaussians from the standard normal, summed.
pub fn kl_standard_normal(d: &LatentGaussianSeq) -> f64 {
    d.mu.iter()
        .zip(d.sigma.iter())
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainLog {
    pub epochs: Vec<VaeLoss>,
}

pub fn shuffled_batches(
    samples: &[&Sample],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_len.entry(s.motion.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_len {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// Seeded minibatch training on the train split.
pub fn train_vae(dataset: &Dataset, cfg: &VaeConfig) -> Result<(VaeModel, VaeTrainLog)> {
    cfg.validate()?;
    let train: Vec<&Sample> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let states: Vec<Mat> = train.iter().map(|s| s.motion.to_state()).collect();
    let stats = StateStats::fit(&states, 1e-2)?;
    let arch = VaeArch {
        feature_dim: dataset.feature_dim,
        joints: dataset.skeleton.joint_count(),
        limbs: dataset.skeleton.limb_count(),
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden,
        decoder_hidden: cfg.decoder_hidden,
        bidirectional: cfg.bidirectional,
    };
    let mut model = VaeModel::new(arch, &stats, cfg.seed)?;
    let features: Vec<Mat> = train
        .iter()
        .map(|s| s.observations.feature_matrix())
        .collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut log = VaeTrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut mean = VaeLoss::default();
        let batches = shuffled_batches(&train, cfg.batch_size, &mut rng);
        for idx in &batches {
            let samples: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let targets = Targets::from_samples(&samples, &dataset.skeleton, &dataset.camera)?;
            let feats = stack_frames(&idx.iter().map(|&i| &features[i]).collect::<Vec<_>>())?;
            let eps = Mat::from_fn(feats.nrows(), cfg.latent_dim, |_, _| {
                StandardNormal.sample(&mut rng)
            });
            let mut tape = Tape::new();
            let (total, parts) = model
                .loss(
                    &mut tape,
                    Bind::train(&model.store),
                    &targets,
                    &feats,
                    &eps,
                    &cfg.weights,
                )
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        checkpoint: None,
                    },
                    other => other,
                })?;
            let mut grads = tape.backward(total)?;
            grads.clip_norm(cfg.clip_norm);
            model
                .store
                .adam_step(&grads, &adam)
                .map_err(|_| Error::Diverged {
                    epoch,
                    checkpoint: None,
                })?;
            mean.add_scaled(&parts, 1.0 / batches.len() as f64);
        }
        log::info!(
            "vae epoch {epoch}: total {:.4} motion {:.4} shape {:.5} joint {:.4} reproj {:.2} kl {:.2}",
            mean.total,
            mean.motion,
            mean.shape,
            mean.joint,
            mean.reproj,
            mean.kl
        );
        log.epochs.push(mean);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::state_positions;
    use crate::nn::gradcheck::check_gradients_except;
    use crate::ops::project_values;
    use crate::synth::dataset::{default_camera, generate_dataset, DataConfig};
    use crate::synth::make_skeleton;
    use proptest::prelude::*;

    fn small_arch(bidirectional: bool) -> VaeArch {
        VaeArch {
            feature_dim: 5,
            joints: 3,
            limbs: 1,
            latent_dim: 4,
            hidden: 6,
            decoder_hidden: 7,
            bidirectional,
        }
    }

    fn unit_stats(d: usize) -> StateStats {
        StateStats {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    fn tiny_data(train: usize, frames: usize) -> Dataset {
        generate_dataset(&DataConfig {
            train_sequences: train,
            test_sequences: 0,
            frames,
            feature_dim: 8,
            ..DataConfig::default()
        })
        .unwrap()
    }

    fn random_features(h: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(h, d, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn zero_encoder_emits_head_biases() {
        let mut m = VaeModel::new(small_arch(true), &unit_stats(21), 1).unwrap();
        for name in m.encoder_param_names() {
            let id = m.store.id(&name).unwrap();
            m.store.value_mut(id).fill(0.0);
        }
        let mu_b = m.store.id("encoder.mu.bias").unwrap();
        let ls_b = m.store.id("encoder.log_sigma.bias").unwrap();
        *m.store.value_mut(mu_b) = Mat::from_row_slice(1, 4, &[0.5, -1.0, 0.0, 2.0]);
        *m.store.value_mut(ls_b) = Mat::from_row_slice(1, 4, &[0.0, -0.5, 1.0, -9.0]);
        let d = m.encode(&random_features(6, 5, 3)).unwrap();
        for h in 0..6 {
            assert_eq!(
                d.mu.row(h).iter().copied().collect::<Vec<_>>(),
                vec![0.5, -1.0, 0.0, 2.0]
            );
            let expect = [1.0, (-0.5f64).exp(), 1.0f64.exp(), LOG_SIGMA_MIN.exp()];
            for k in 0..4 {
                assert!((d.sigma[(h, k)] - expect[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_encoder_is_causal() {
        let m = VaeModel::new(small_arch(false), &unit_stats(21), 2).unwrap();
        let f = random_features(8, 5, 4);
        let base = m.encode(&f).unwrap();
        let mut g = f.clone();
        g[(5, 2)] += 0.7;
        let moved = m.encode(&g).unwrap();
        for h in 0..5 {
            assert_eq!(base.mu.row(h), moved.mu.row(h));
        }
        assert_ne!(base.mu.row(5), moved.mu.row(5));
        let mut g = f.clone();
        g[(0, 0)] -= 0.7;
        let moved = m.encode(&g).unwrap();
        assert_ne!(base.mu.row(7), moved.mu.row(7));
    }

    #[test]
    fn zero_decoder_repeats_the_bias_pose() {
        let mut m = VaeModel::new(small_arch(true), &unit_stats(21), 5).unwrap();
        for name in m.store.names().to_vec() {
            if name.starts_with("decoder.motion") || name.starts_with("decoder.shape") {
                let id = m.store.id(&name).unwrap();
                m.store.value_mut(id).fill(0.0);
            }
        }
        let last = m.store.id("decoder.motion.2.bias").expect("output bias");
        m.store.value_mut(last).fill(0.25);
        let (s, beta) = m.decode_state(&random_features(5, 4, 6)).unwrap();
        for h in 0..5 {
            assert!(s.row(h).iter().all(|v| *v == 0.25));
        }
        assert_eq!(beta, vec![1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shapes_are_positive(seed in 0u64..1000, scale in 0.1f64..30.0) {
            let m = VaeModel::new(small_arch(true), &unit_stats(21), seed).unwrap();
            let z = random_features(4, 4, seed) * scale;
            let (_, beta) = m.decode_state(&z).unwrap();
            prop_assert!(beta.iter().all(|b| *b > 0.0 && b.is_finite()));
        }
    }

    #[test]
    fn kl_closed_form() {
        let d = LatentGaussianSeq {
            mu: Mat::zeros(3, 2),
            sigma: Mat::from_element(3, 2, 1.0),
        };
        assert_eq!(kl_standard_normal(&d), 0.0);
        let mu = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.0]);
        let d = LatentGaussianSeq {
            mu: mu.clone(),
            sigma: Mat::from_element(2, 2, 1.0),
        };
        assert!((kl_standard_normal(&d) - mu.norm_squared() / 2.0).abs() < 1e-15);
        let d = LatentGaussianSeq {
            mu: Mat::zeros(1, 1),
            sigma: Mat::from_element(1, 1, 0.3),
        };
        assert!(kl_standard_normal(&d) > 0.0);
    }

    fn exact_targets<'a>(camera: &'a Camera, frames: usize) -> (Targets<'a>, Skeleton) {
        let skel = make_skeleton("biped9").unwrap();
        let mut motion =
            crate::synth::generate_motion(&skel, crate::synth::MotionKind::Walk, 60, 3).unwrap();
        motion.frames.truncate(frames);
        let states = motion.to_state();
        let pos = state_positions(&skel, &states);
        let kp = project_values(camera, &pos);
        let j = skel.joint_count();
        (
            Targets {
                batch: 1,
                states,
                betas: Mat::from_row_slice(1, skel.limb_count(), &skel.scales),
                skeletons: vec![skel.clone()],
                keypoints: kp,
                confidence: Mat::from_element(frames, j, 1.0),
                camera,
            },
            skel,
        )
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let camera = default_camera();
        let (t, skel) = exact_targets(&camera, 6);
        let mut tape = Tape::new();
        let pred = tape.constant(t.states.clone());
        let beta = tape.constant(t.betas.clone());
        let mu = tape.constant(Mat::zeros(6, 4));
        let ls = tape.constant(Mat::zeros(6, 4));
        let (total, parts) =
            vae_terms(&mut tape, pred, beta, mu, ls, &t, &LossWeights::default()).unwrap();
        assert_eq!(parts.motion, 0.0);
        assert_eq!(parts.shape, 0.0);
        assert_eq!(parts.joint, 0.0);
        assert!(parts.reproj < 1e-18, "{}", parts.reproj);
        assert_eq!(parts.kl, 0.0);
        assert!(tape.scalar(total) < 1e-20);
        assert_eq!(skel.limb_count(), 2);
    }

    #[test]
    fn reprojection_gradient_matches_differences() {
        let camera = default_camera();
        let (mut t, skel) = exact_targets(&camera, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        t.keypoints = t
            .keypoints
            .map(|v| v + rand::Rng::random_range(&mut rng, -20.0..20.0));
        t.confidence = t
            .confidence
            .map(|_| rand::Rng::random_range(&mut rng, 0.1..1.0));
        let arch = VaeArch {
            feature_dim: 3,
            joints: skel.joint_count(),
            limbs: skel.limb_count(),
            latent_dim: 3,
            hidden: 3,
            decoder_hidden: 4,
            bidirectional: false,
        };
        let stats = StateStats::fit([&t.states], 1e-2).unwrap();
        let m = VaeModel::new(arch, &stats, 4).unwrap();
        let z = random_features(3, 3, 8);
        let w = LossWeights {
            motion: 0.0,
            shape: 0.0,
            joint: 0.0,
            reproj: 1.0,
            kl: 0.0,
        };
        let report = check_gradients_except(
            &m.store,
            1e-5,
            &["decoder.state_mean", "decoder.state_scale"],
            |store, tape, bind| {
                let zv = tape.constant(z.clone());
                let mut probe = m.clone();
                probe.store = store.clone();
                let (state, beta) = probe.decode_vars(tape, bind, zv, 1).unwrap();
                let mu = tape.constant(Mat::zeros(3, 3));
                let ls = tape.constant(Mat::zeros(3, 3));
                vae_terms(tape, state, beta, mu, ls, &t, &w).unwrap().0
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn full_loss_gradient_matches_differences() {
        let camera = default_camera();
        let (t, skel) = exact_targets(&camera, 3);
        let arch = VaeArch {
            feature_dim: 3,
            joints: skel.joint_count(),
            limbs: skel.limb_count(),
            latent_dim: 2,
            hidden: 3,
            decoder_hidden: 3,
            bidirectional: true,
        };
        let stats = StateStats::fit([&t.states], 1e-2).unwrap();
        let m = VaeModel::new(arch, &stats, 6).unwrap();
        let f = random_features(3, 3, 10);
        let eps = random_features(3, 2, 11);
        let report = check_gradients_except(
            &m.store,
            1e-5,
            &["decoder.state_mean", "decoder.state_scale"],
            |store, tape, bind| {
                let mut probe = m.clone();
                probe.store = store.clone();
                probe
                    .loss(tape, bind, &t, &f, &eps, &LossWeights::default())
                    .unwrap()
                    .0
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        let mu = Mat::from_row_slice(2, 3, &[0.3, -1.0, 2.0, 0.0, 0.5, -0.2]);
        let sigma = Mat::from_row_slice(2, 3, &[1.0, 0.2, 3.0, 0.05, 1.5, 0.7]);
        let d = LatentGaussianSeq {
            mu: mu.clone(),
            sigma: sigma.clone(),
        };
        let n = 10_000;
        let mut sum = Mat::zeros(2, 3);
        for k in 0..n {
            sum += reparam_sample(&d, k as u64);
        }
        let mean = sum / n as f64;
        for i in 0..6 {
            assert!(
                (mean[i] - mu[i]).abs() <= 3.0 * sigma[i] / 100.0,
                "coordinate {i}"
            );
        }
    }

    #[test]
    fn vanishing_sigma_returns_mu() {
        let d = LatentGaussianSeq {
            mu: Mat::from_row_slice(1, 2, &[0.4, -3.0]),
            sigma: Mat::from_element(1, 2, 1e-300),
        };
        assert_eq!(reparam_sample(&d, 7), d.mu);
        assert_eq!(reparam_sample(&d, 7), reparam_sample(&d, 7));
    }

    #[test]
    fn nan_component_is_named() {
        let loss = VaeLoss {
            reproj: f64::NAN,
            ..VaeLoss::default()
        };
        let err = loss.check().unwrap_err();
        assert!(err.to_string().contains("L_reproj"), "{err}");
    }

    #[test]
    fn stats_round_trip() {
        let a = random_features(5, 4, 1) * 3.0;
        let stats = StateStats::fit([&a], 1e-3).unwrap();
        let n = stats.normalize(&a);
        assert!((n.row_sum() / 5.0).norm() < 1e-12);
        assert!((stats.denormalize(&n) - &a).norm() < 1e-12);
    }

    #[test]
    fn checkpoint_rebuild_matches() {
        let ds = tiny_data(2, 40);
        let (m, _) = train_vae(
            &ds,
            &VaeConfig {
                epochs: 1,
                hidden: 4,
                latent_dim: 3,
                decoder_hidden: 4,
                ..VaeConfig::default()
            },
        )
        .unwrap();
        let back = VaeModel::from_store(m.store.clone(), &m.meta()).unwrap();
        let f = ds.samples[0].observations.feature_matrix();
        assert_eq!(back.encode(&f).unwrap(), m.encode(&f).unwrap());
        assert_eq!(back.stats(), m.stats());
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let ds = tiny_data(8, 40);
        let cfg = VaeConfig {
            epochs: 5,
            batch_size: 8,
            lr: 3e-3,
            hidden: 16,
            latent_dim: 8,
            decoder_hidden: 16,
            ..VaeConfig::default()
        };
        let (_, log) = train_vae(&ds, &cfg).unwrap();
        let totals: Vec<f64> = log.epochs.iter().map(|e| e.total).collect();
        assert!(totals[4] < totals[0], "{totals:?}");
        assert!(totals[3] + totals[4] < totals[0] + totals[1], "{totals:?}");
        assert!(log.epochs.iter().all(|e| e.kl >= 0.0 && e.kl.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_data(3, 40);
        let cfg = VaeConfig {
            epochs: 2,
            hidden: 4,
            latent_dim: 3,
            decoder_hidden: 4,
            ..VaeConfig::default()
        };
        let (a, _) = train_vae(&ds, &cfg).unwrap();
        let (b, _) = train_vae(&ds, &cfg).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let m = VaeModel::new(small_arch(true), &unit_stats(21), 1).unwrap();
        assert!(m.encode(&Mat::zeros(3, 4)).is_err());
        assert!(m.decode_state(&Mat::zeros(3, 5)).is_err());
    }
}
