//! Width-scaling laboratory for leaky-ReLU classifiers.
//!
//! The [`scaling`] module predicts how weight increments and output terms scale
//! with the width; the remaining modules train finite-width nets, measure those
//! quantities, and fit power laws to the measurements.

pub mod dataset;
pub mod exponent;
pub mod mf;
pub mod net;
pub mod powerlaw;
pub mod probes;
pub mod scaling;
pub mod trainer;

pub use exponent::Exponent;
