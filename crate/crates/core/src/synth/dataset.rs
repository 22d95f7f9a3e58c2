use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate_motion, MotionKind, FPS};
use super::observe::{synthesize_observations, FeatureMap, NoiseConfig, Observations};
use super::skeletons::make_skeleton;
use crate::error::{Error, Result};
use crate::motion::{Camera, Frame, Motion, Skeleton};

pub const DATA_VERSION: &str = "pgm-data/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One ground-truth sequence with its observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub kind: MotionKind,
    pub seed: u64,
    /// Per-limb bone scales.
    pub beta: Vec<f64>,
    pub motion: Motion,
    pub observations: Observations,
}

impl Sample {
    pub fn skeleton(&self, base: &Skeleton) -> Result<Skeleton> {
        base.with_scales(&self.beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Skeleton with unit scales; samples carry their own scales.
    pub skeleton: Skeleton,
    pub camera: Camera,
    pub fps: f64,
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub samples: Vec<Sample>,
    /// Free-form tags recorded in the file header, e.g. the generating
    /// config hash.
    pub provenance: BTreeMap<String, String>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(
            self.skeleton.joint_count(),
            self.feature_dim,
            self.feature_seed,
        )
    }
}

/// How to build a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub skeleton: String,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    /// Relative frequency of walk, squat and idle sequences.
    pub kind_weights: [f64; 3],
    pub beta_range: [f64; 2],
    pub feature_dim: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            skeleton: "biped9".into(),
            train_sequences: 48,
            test_sequences: 20,
            frames: 90,
            kind_weights: [0.6, 0.2, 0.2],
            beta_range: [0.9, 1.1],
            feature_dim: 32,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        make_skeleton(&self.skeleton)?;
        if self.frames < 2 {
            return Err(Error::Invalid("data.frames must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Invalid("data.feature_dim must be positive".into()));
        }
        if self.kind_weights.iter().any(|w| !(*w >= 0.0))
            || self.kind_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Invalid(
                "data.kind_weights must be non-negative with a positive sum".into(),
            ));
        }
        let [lo, hi] = self.beta_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Invalid(
                "data.beta_range must be positive and ordered".into(),
            ));
        }
        self.noise.validate()
    }
}

/// The fixed scene camera: about 4.7 m from the origin, slightly elevated.
pub fn default_camera() -> Camera {
    Camera::look_at(
        Vector3::new(0.0, -4.5, 1.6),
        Vector3::new(0.0, 0.0, 0.9),
        1000.0,
        500.0,
        500.0,
    )
    .expect("fixed camera is valid")
}

/// Build a corpus: train sequences first, then test sequences.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let base = make_skeleton(&cfg.skeleton)?;
    let legged = !base.feet.is_empty();
    let camera = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let feature_seed: u64 = rng.random();
    let features = FeatureMap::new(base.joint_count(), cfg.feature_dim, feature_seed);
    let total: f64 = cfg.kind_weights.iter().sum();
    let mut samples = Vec::with_capacity(cfg.train_sequences + cfg.test_sequences);
    for i in 0..cfg.train_sequences + cfg.test_sequences {
        let split = if i < cfg.train_sequences {
            Split::Train
        } else {
            Split::Test
        };
        let seed: u64 = rng.random();
        let pick = rng.random::<f64>() * total;
        let kind = if !legged {
            MotionKind::Idle
        } else if pick < cfg.kind_weights[0] {
            MotionKind::Walk
        } else if pick < cfg.kind_weights[0] + cfg.kind_weights[1] {
            MotionKind::Squat
        } else {
            MotionKind::Idle
        };
        let beta: Vec<f64> = (0..base.limb_count())
            .map(|_| {
                let [lo, hi] = cfg.beta_range;
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        let skel = base.with_scales(&beta)?;
        let motion = generate_motion(&skel, kind, cfg.frames, seed)?;
        let noise = NoiseConfig {
            seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            ..cfg.noise.clone()
        };
        let observations = synthesize_observations(&motion, &skel, &camera, &noise, &features)?;
        samples.push(Sample {
            split,
            kind,
            seed,
            beta,
            motion,
            observations,
        });
    }
    Ok(Dataset {
        skeleton: base,
        camera,
        fps: FPS,
        feature_dim: cfg.feature_dim,
        feature_seed,
        samples,
        provenance: BTreeMap::new(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    skeleton: Skeleton,
    camera: Camera,
    fps: f64,
    #[serde(rename = "D_F")]
    feature_dim: usize,
    feature_seed: u64,
    sequences: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    sequence: usize,
    split: Split,
    kind: MotionKind,
    seed: u64,
    beta: Vec<f64>,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    seq: usize,
    h: usize,
    rot6d: Vec<[f64; 6]>,
    tau: [f64; 3],
    keypoints: Vec<[f64; 3]>,
    features: Vec<f64>,
}

pub fn dataset_to_jsonl(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    let header = Header {
        version: DATA_VERSION.into(),
        skeleton: ds.skeleton.clone(),
        camera: ds.camera.clone(),
        fps: ds.fps,
        feature_dim: ds.feature_dim,
        feature_seed: ds.feature_seed,
        sequences: ds.samples.len(),
        provenance: ds.provenance.clone(),
    };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for (i, s) in ds.samples.iter().enumerate() {
        let rec = SequenceRecord {
            sequence: i,
            split: s.split,
            kind: s.kind,
            seed: s.seed,
            beta: s.beta.clone(),
            frames: s.motion.len(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
        for (h, (f, (k, feat))) in s
            .motion
            .frames
            .iter()
            .zip(
                s.observations
                    .keypoints
                    .iter()
                    .zip(&s.observations.features),
            )
            .enumerate()
        {
            let fr = FrameRecord {
                seq: i,
                h,
                rot6d: f.rot6d.clone(),
                tau: f.tau,
                keypoints: k.clone(),
                features: feat.clone(),
            };
            out.push_str(&serde_json::to_string(&fr)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, number: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        msg: e.to_string(),
    })
}

pub fn dataset_from_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let version = serde_json::from_str::<serde_json::Value>(first)
        .ok()
        .and_then(|v| v.get("version").and_then(|v| v.as_str().map(String::from)));
    match version {
        Some(v) if v == DATA_VERSION => {}
        Some(v) => {
            return Err(Error::Version {
                found: v,
                expected: DATA_VERSION.into(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "header has no version".into(),
            })
        }
    }
    let header: Header = parse_line(first, 1)?;
    let mut samples = Vec::with_capacity(header.sequences);
    let mut last_line = 1;
    for i in 0..header.sequences {
        let (n, l) = lines.next().ok_or(Error::Parse {
            line: last_line + 1,
            msg: format!("expected sequence {i} of {}", header.sequences),
        })?;
        let rec: SequenceRecord = parse_line(l, n)?;
        last_line = n;
        if rec.sequence != i {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected sequence {i}, found {}", rec.sequence),
            });
        }
        let mut frames = Vec::with_capacity(rec.frames);
        let mut keypoints = Vec::with_capacity(rec.frames);
        let mut features = Vec::with_capacity(rec.frames);
        for h in 0..rec.frames {
            let (n, l) = lines.next().ok_or(Error::Parse {
                line: last_line + 1,
                msg: format!("sequence {i} ended after {h} of {} frames", rec.frames),
            })?;
            let fr: FrameRecord = parse_line(l, n)?;
            last_line = n;
            if fr.seq != i || fr.h != h {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("expected frame {h} of sequence {i}"),
                });
            }
            frames.push(Frame {
                rot6d: fr.rot6d,
                tau: fr.tau,
            });
            keypoints.push(fr.keypoints);
            features.push(fr.features);
        }
        let motion = Motion {
            fps: header.fps,
            frames,
        };
        let observations = Observations {
            keypoints,
            features,
        };
        observations.validate().map_err(|e| Error::Parse {
            line: last_line,
            msg: e.to_string(),
        })?;
        samples.push(Sample {
            split: rec.split,
            kind: rec.kind,
            seed: rec.seed,
            beta: rec.beta,
            motion,
            observations,
        });
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: n,
            msg: "unexpected trailing record".into(),
        });
    }
    Ok(Dataset {
        skeleton: header.skeleton,
        camera: header.camera,
        fps: header.fps,
        feature_dim: header.feature_dim,
        feature_seed: header.feature_seed,
        samples,
        provenance: header.provenance,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_jsonl(ds)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_jsonl(&text)
}
