//! High-level feature guided segmentation decoder, built on a small
//! float64 reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u16 = 255;
