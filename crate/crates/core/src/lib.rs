//! Multiclass learning to defer: surrogate losses, probability estimators,
//! small trainable models, simulated experts with an exact Bayes oracle,
//! calibration diagnostics and budgeted deferral policies.

pub mod calibration;
pub mod data;
pub mod deferral;
pub mod error;
pub mod estimators;
pub mod losses;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
