//! Toy-scale residual-stream steering toolkit.
//!
//! A small decoder-only transformer is trained from scratch on synthetic
//! two-behavior corpora; a JumpReLU sparse autoencoder is trained on its
//! residual-stream activations; steering vectors are built by contrastive
//! activation addition (CAA), by decoding all latent contrast atoms, or by
//! decoding only target atoms selected on amplitude and frequency contrast.
//! An evaluation harness measures behavior shift, fluency collapse, token
//! distributions, multiplier boundaries, and reasoning-length control.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod sae;
pub mod steering;
pub mod tensor;
pub mod toymodel;

pub use error::{Error, Result};
pub use tensor::Tensor;
