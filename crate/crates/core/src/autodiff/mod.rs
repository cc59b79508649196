//! Reverse-mode differentiation, the optimizer, and the two-phase trainer.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod params;
pub mod tape;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_gradcheck, GradcheckReport};
pub use loss::cross_entropy_loss;
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use train::{train_two_phase, EpochRecord, Schedule, TrainReport};
