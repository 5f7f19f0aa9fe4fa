//! Text-guided 3D segmentation at desk scale.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation, a decomposed-convolution volumetric encoder, a two-way
//! fusion transformer with grouped-query attention and rotary position
//! embeddings, a similarity-matrix mask decoder with two-pass refinement,
//! a training/inference pipeline over synthetic volumes, a semantic and
//! instance evaluation stack, and an analytic parameter/FLOP cost model.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `esica` binary for the command-line surface.

pub mod error;
pub mod config;
pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod formats;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plan;
pub mod prompt;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{grad_check, Gradients, Tensor};
