//! Learnable orthogonal subspace projection layers for privacy-aware
//! feature filtering.
//!
//! The crate is `no_std` (with `alloc`) and holds everything numerical:
//! dense linear algebra, a small reverse-mode tape, the dense backbone with
//! insertable projection layers, the loss terms, a deterministic trainer,
//! the evaluation metrics and a planted-subspace data generator.
//! File formats and the command line live in the `opl` crate.

#![no_std]
// `!(x > 0.0)` is the NaN-rejecting form of a positivity check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
