//! Dense `f64` tensors with hand-written reverse-mode gradients for the
//! operation set the forecasting pipeline uses.

mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_VERSION,
};
pub use params::{BoundParams, ParamSet};
pub use tape::{sigmoid, CustomBackward, Tape, Var};
pub use tensor::Tensor;
