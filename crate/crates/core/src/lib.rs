//! Multi-view clustering engine: per-view autoencoders, a selective-scan
//! fusion network, similarity-weighted contrastive alignment and k-means
//! evaluation, all on top of a small reverse-mode autodiff tape.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! everything else that touches the operating system live in the `tmcn`
//! companion crate. The `std` feature switches the hot float functions to
//! the platform math library.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod ascl;
pub mod autoencoder;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod math;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tmfn;
pub mod train;

pub use error::{Error, TensorError};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;
