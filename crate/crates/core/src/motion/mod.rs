//! Kinematic representations, camera model, alignment and evaluation metrics.

pub mod camera;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod procrustes;
pub mod rotation;
pub mod sequence;
pub mod skeleton;

pub use camera::Camera;
pub use kinematics::{
    fk_pose, forward_kinematics, motion_positions, state_positions, state_positions_batch, Pose,
};
pub use metrics::{compute_metrics, compute_metrics_with, MetricOptions, MetricReport};
pub use procrustes::{procrustes_align, Similarity};
pub use rotation::{matrix_to_rot6d, rot6d_to_matrix, Rot6};
pub use sequence::{Frame, Motion};
pub use skeleton::Skeleton;
