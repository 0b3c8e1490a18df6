//! Graph neural networks with adaptive readout functions.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! graph data handling ([`graph`]), message-passing layers, attention
//! blocks, the readout family (sum/mean/max, MLP, GRU, Set Transformer,
//! Janossy), a guided variational graph autoencoder, a deterministic
//! training loop and the experiment harness behind the `gnn-readouts` CLI.

pub mod attention;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod message_passing;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod readouts;
pub mod tensor;
pub mod training;
pub mod vgae;

pub use error::{Error, Result};
