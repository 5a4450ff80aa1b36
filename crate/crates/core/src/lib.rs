//! Occlusion-adaptive two-branch expression classifier, desk scale.
//!
//! A landmark-guided attention branch gates occluded facial regions out of
//! the backbone feature maps, while a region branch trains independent
//! per-block classifiers; both are trained end-to-end against a combined
//! loss on a reverse-mode tape.

pub mod error;
pub mod gradcheck;
pub mod config;
pub mod landmark;
pub mod model;
pub mod synth;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{OadnError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
