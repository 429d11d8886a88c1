//! Decoder-only transformer with an explicit backward pass, and the tools
//! for reading its gradients in vocabulary space.
//!
//! Every MLP gradient produced by a single prompt is a sum of per-token
//! outer products `Σ_i x_iᵀ · δ_i`. This crate computes the forward inputs
//! `x_i` and VJPs `δ_i` exactly, rebuilds gradients from them, projects them
//! through the decoder (Logit Lens), and edits models either by one SGD
//! step or by a forward-pass-only rank-1 shift.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the `backlens` crate.
#![no_std]

extern crate alloc;

pub mod analysis;
pub mod corpus;
pub mod editing;
pub mod engine;
pub mod error;
pub mod lens;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod span;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{ModelConfig, ModelWeights, MlpMatrix, ParamId, Prompt, Segment, Vocab};
