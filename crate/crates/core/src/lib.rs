//! Data model, losses, verification metrics, feature diagnostics, conformal
//! calibration, quantile mapping and attribution utilities for long-tail
//! heavy-rain post-processing.

pub mod attribution;
pub mod conformal;
pub mod container;
pub mod data;
pub mod error;
pub mod feature_quality;
pub mod field;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod qm;

pub use error::{Error, Result};
