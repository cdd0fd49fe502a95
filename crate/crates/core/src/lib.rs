//! Gaussian-process-modulated Poisson process inference from panel count data.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod kernel;
mod linalg;
pub mod numerics;
pub mod objective;
mod optim;
pub mod svgp;

pub use error::{Error, Result};
