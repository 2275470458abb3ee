//! Probabilistic-calibration toolkit for regression.

pub mod calib;
pub mod conformal;
pub mod data;
pub mod dist;
pub mod error;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod train;
