//! Training objective, retrieval metrics and similarity-matrix ensembling for
//! language-based audio retrieval with small dual encoders.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats and the command-line surface live in `xmrt-cli`.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod clustering;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod losses;
pub mod math;
pub mod training;

pub use error::{Error, Result};
pub use math::{Axis, DenseMatrix, ProbabilityMatrix, SimilarityMatrix};
