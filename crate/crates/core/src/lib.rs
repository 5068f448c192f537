//! Differentiable 2D finite-volume incompressible flow solver with a
//! trainable convection interpolation scheme.
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod discretization;
pub mod error;
pub mod fields;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod neuralscheme;
pub mod schemes;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
