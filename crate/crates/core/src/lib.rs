//! Occupancy detection from smart-meter load profiles with an
//! attention-augmented fully convolutional network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a tape-based reverse-mode engine.
//! * [`model`]: the FCN feature extractor, the parallel attention block
//!   (channel, variable and temporal attention) and the spectrally
//!   normalized classifier.
//! * [`data`]: meter CSV ingestion, minute aggregation, windowing, case
//!   qualification, splitting, normalization and oversampling.
//! * [`training`]: NLL loss, Adam, warmup-cosine schedule and
//!   best-validation-F1 model selection.
//! * [`eval`]: confusion counts, metrics and aggregation over trials.
//! * [`gradcheck`]: finite-difference verification of the whole network.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use tensor::{Graph, Tensor, Var};
