//! Transparent-object depth completion.
//!
//! A from-scratch RGB-D depth-completion network built on a small
//! reverse-mode autodiff engine: a shifted-window attention encoder, a
//! squeeze-excite feature fusion module, a convolutional decoder with skip
//! connections, the masked reconstruction + normal-consistency loss, the
//! standard depth metrics, a synthetic transparent-scene generator and
//! point-cloud export.

pub mod attention;
pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
