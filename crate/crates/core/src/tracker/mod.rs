//! Floating-base character with penalty ground contact, driven by a PD
//! controller toward a reference motion.

pub mod character;
pub mod sim;
pub mod track;

pub use character::{build_character, Character, TrackerConfig, GRAVITY};
pub use sim::{pd_policy, step_sim, Action, RefPose, SimState};
pub use track::{success_rate, track, TrackResult};
