//! Reverse-mode autodiff, Transformer layers, Adam, checkpoints, and
//! finite-difference gradient verification. Everything runs in f64;
//! this is both the training and the verification mode at desk scale.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC};
pub use gradcheck::{grad_check, GradCheckFailure, GradCheckReport};
pub use params::{Adam, Gradients, Param, ParameterStore};
pub use tape::{Tape, TensorId};
