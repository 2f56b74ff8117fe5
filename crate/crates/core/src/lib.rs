//! Iterative magnitude pruning of small convolutional networks trained with
//! supervised, self-supervised and semi-supervised objectives.
//!
//! The crate bundles its own reverse-mode autograd engine, a pair of small
//! convnet architectures, synthetic and file-backed datasets, the pruning
//! and ticket-extraction machinery, evaluation protocols and an experiment
//! harness with checkpoint and CSV output.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod pretext;
pub mod pruning;
pub mod records;
pub mod rng;
pub mod tensor;
pub mod ticket;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Element, Precision, Tensor};
