//! Desk-scale laboratory for modality-agnostic first-order meta-learning on
//! sequence-to-sequence tasks.
//!
//! Speech-like (frames → text) and translation-like (text → text) source
//! tasks meta-train an initialisation that is then fine-tuned on a
//! low-resource frames → translated-text task. Everything runs on a small
//! reverse-mode autodiff core in [`graph`].

pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{GradientMap, Graph, NodeId};
pub use params::ModelParams;
pub use tensor::{Real, Tensor};
