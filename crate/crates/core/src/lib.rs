//! CBAM-augmented convolutional classifier for two-class skin-lesion images.
//!
//! The crate carries its own f64 tensor type and reverse-mode autodiff tape
//! ([`tensor`]), the channel/spatial attention block ([`cbam`]), the full
//! backbone → attention → dense-head model ([`model`]), Adam training with
//! best-validation-loss checkpointing ([`training`]), confusion-matrix metrics
//! and k-fold cross-validation ([`evaluation`]), and image ingestion plus a
//! synthetic dataset generator ([`data`]).

pub mod cbam;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, PoolMode, Shape, Tensor, Var};
