//! Minimal differentiable toolkit: tape autodiff, dense and recurrent layers,
//! Adam, and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use batch::{pooling_matrix, stack_frames, unstack_frames};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Activation, BiGru, Bind, Dense, Gru, Mlp, MlpSpec, SeqEncoder};
pub use params::{AdamConfig, Gradients, ParamStore};
pub use tape::{CustomOp, Mat, Tape, Var};
