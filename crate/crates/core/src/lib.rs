//! Defocus blur detection toolkit: DFFNet/PDNet models, depth feature
//! distillation, DOF-edge losses, a thin-lens synthetic data generator and
//! the MAE / F-beta / IoU / PR metric suite.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod seed;

pub use error::{DbdError, Result};
