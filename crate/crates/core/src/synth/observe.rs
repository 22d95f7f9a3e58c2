use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{motion_positions, Camera, Motion, Skeleton};

/// Simulated detector noise and occlusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma_px: f64,
    /// Probability that a keypoint is occluded.
    pub dropout: f64,
    /// Confidence range of occluded keypoints.
    pub dropped_confidence: [f64; 2],
    /// Half-width in pixels of the uniform error of occluded keypoints.
    pub dropped_radius_px: f64,
    pub sigma_feature: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_px: 4.0,
            dropout: 0.1,
            dropped_confidence: [0.0, 0.3],
            dropped_radius_px: 60.0,
            sigma_feature: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            sigma_px: 0.0,
            dropout: 0.0,
            sigma_feature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "noise.dropout = {} is not a probability",
                self.dropout
            )));
        }
        let [lo, hi] = self.dropped_confidence;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!(
                "noise.dropped_confidence = [{lo}, {hi}] must lie in [0, 1]"
            )));
        }
        if !(self.sigma_px >= 0.0 && self.sigma_feature >= 0.0 && self.dropped_radius_px >= 0.0) {
            return Err(Error::Invalid(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed random linear embedding of normalized 2D keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub seed: u64,
    pub matrix: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(joints: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 5.0 / ((2 * joints) as f64).sqrt();
        let matrix = DMatrix::from_fn(dim, 2 * joints, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        FeatureMap { seed, matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Features of one frame from its exact pixel keypoints.
    pub fn embed(&self, camera: &Camera, pixels: &[[f64; 2]]) -> Vec<f64> {
        let flat: Vec<f64> = pixels
            .iter()
            .flat_map(|p| {
                [
                    (p[0] - camera.cx) / camera.fx,
                    (p[1] - camera.cy) / camera.fy,
                ]
            })
            .collect();
        let v = &self.matrix * nalgebra::DVector::from_vec(flat);
        v.iter().copied().collect()
    }
}

/// Detected 2D keypoints with confidences plus per-frame features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    /// `[u, v, confidence]` per frame and joint.
    pub keypoints: Vec<Vec<[f64; 3]>>,
    pub features: Vec<Vec<f64>>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.keypoints.first().map_or(0, Vec::len)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.keypoints.len() {
            return Err(Error::Shape(format!(
                "{} keypoint frames vs {} feature frames",
                self.keypoints.len(),
                self.features.len()
            )));
        }
        let (j, d) = (self.joint_count(), self.feature_dim());
        for (h, (k, f)) in self.keypoints.iter().zip(&self.features).enumerate() {
            if k.len() != j || f.len() != d {
                return Err(Error::Shape(format!("ragged observation at frame {h}")));
            }
            if k.iter()
                .any(|p| !(0.0..=1.0).contains(&p[2]) || !p[0].is_finite() || !p[1].is_finite())
            {
                return Err(Error::Invalid(format!("bad keypoint at frame {h}")));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("feature at frame {h}")));
            }
        }
        Ok(())
    }

    /// `H x 2J` pixel coordinates.
    pub fn keypoint_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 2 * self.joint_count(), |h, c| {
            self.keypoints[h][c / 2][c % 2]
        })
    }

    /// `H x J` confidences.
    pub fn confidence_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.joint_count(), |h, j| {
            self.keypoints[h][j][2]
        })
    }

    /// `H x D_F` features.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.feature_dim(), |h, c| self.features[h][c])
    }
}

/// Simulate a detector looking at `motion` through `camera`.
pub fn synthesize_observations(
    motion: &Motion,
    skeleton: &Skeleton,
    camera: &Camera,
    noise: &NoiseConfig,
    features: &FeatureMap,
) -> Result<Observations> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let pixel_noise =
        Normal::new(0.0, noise.sigma_px).map_err(|e| Error::Invalid(e.to_string()))?;
    let feat_noise =
        Normal::new(0.0, noise.sigma_feature).map_err(|e| Error::Invalid(e.to_string()))?;
    let positions = motion_positions(skeleton, motion)?;
    let mut keypoints = Vec::with_capacity(motion.len());
    let mut feats = Vec::with_capacity(motion.len());
    for frame in &positions {
        let exact = camera.project(frame)?;
        let pixels: Vec<[f64; 2]> = exact.iter().map(|p| [p.x, p.y]).collect();
        let mut row = Vec::with_capacity(exact.len());
        for p in &pixels {
            if rng.random::<f64>() < noise.dropout {
                let r = noise.dropped_radius_px;
                let du = if r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                };
                let dv = if r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                };
                let [lo, hi] = noise.dropped_confidence;
                let c = if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                };
                row.push([p[0] + du, p[1] + dv, c]);
            } else {
                let du = pixel_noise.sample(&mut rng);
                let dv = pixel_noise.sample(&mut rng);
                let err = (du * du + dv * dv).sqrt();
                let c = if noise.sigma_px > 0.0 {
                    (-err / noise.sigma_px).exp().clamp(0.0, 1.0)
                } else {
                    1.0
                };
                row.push([p[0] + du, p[1] + dv, c]);
            }
        }
        keypoints.push(row);
        let f: Vec<f64> = features
            .embed(camera, &pixels)
            .into_iter()
            .map(|x| x + feat_noise.sample(&mut rng))
            .collect();
        feats.push(f);
    }
    Ok(Observations {
        keypoints,
        features: feats,
    })
}

/// Confidence-weighted squared reprojection residual of `motion` against `obs`.
pub fn reprojection_residual(
    motion: &Motion,
    skeleton: &Skeleton,
    camera: &Camera,
    obs: &Observations,
) -> Result<f64> {
    let positions = motion_positions(skeleton, motion)?;
    let mut total = 0.0;
    for (frame, kp) in positions.iter().zip(&obs.keypoints) {
        let px = camera.project(frame)?;
        for (p, k) in px.iter().zip(kp) {
            total += k[2] * ((p.x - k[0]).powi(2) + (p.y - k[1]).powi(2));
        }
    }
    Ok(total)
}

/// Camera-frame depth of every joint; used to validate scene layout.
pub fn min_depth(motion: &Motion, skeleton: &Skeleton, camera: &Camera) -> Result<f64> {
    let mut lo = f64::INFINITY;
    for frame in motion_positions(skeleton, motion)? {
        for p in frame {
            lo = lo.min(camera.to_camera(&Vector3::from(p)).z);
        }
    }
    Ok(lo)
}
