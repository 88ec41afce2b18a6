//! Dual-modality prompt tuning on a small CLIP-style backbone.
//!
//! The crate carries its own reverse-mode autodiff ([`tensor`]), a text and a
//! vision transformer ([`text`], [`vision`]), the classifier and distillation
//! objective ([`loss`]), training and evaluation drivers ([`harness`]) and
//! file formats ([`io`]).

pub mod error;
pub mod harness;
pub mod io;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod text;
pub mod vision;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;
