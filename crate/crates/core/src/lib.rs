//! Self-attention capsule network built on a small reverse-mode tensor core.
//!
//! Pipeline: 5×5 feature convolution → non-local self-attention block →
//! primary capsules → class capsules via routing-by-agreement, trained on the
//! margin loss plus a decoder reconstruction regularizer. A baseline mode
//! drops the attention block.

pub mod attention;
pub mod capsules;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::{Real, Tensor};
