//! Synthetic ground truth: fixture skeletons, procedural motions, a simulated
//! 2D detector with image-like features, and the dataset container.

pub mod dataset;
pub mod generate;
pub mod observe;
pub mod skeletons;

pub use dataset::{read_dataset, write_dataset, Dataset, Sample};
pub use generate::{generate_motion, MotionKind, FPS};
pub use observe::{synthesize_observations, FeatureMap, NoiseConfig, Observations};
pub use skeletons::{make_skeleton, SKELETON_NAMES};
