//! Correspondence-free online motion retargeting between point-cloud characters.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too; index loops
// mirror the formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod skin;
pub mod skr;
pub mod smrm;

pub use error::{Error, Result};
