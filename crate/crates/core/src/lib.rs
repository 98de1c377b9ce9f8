//! Statistics for raw single-cell RNA-seq read counts.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chi2;
pub mod error;
pub mod io;
pub mod matrix;
pub mod special;

pub use error::{Error, Result};
pub use matrix::CountMatrix;
pub mod coex;
pub mod downstream;
pub mod engine;
pub mod estimate;
pub mod kernels;
pub mod pipeline;
pub mod plot;
pub mod synth;
pub mod tables;
pub mod validate;
pub mod zero;
