//! Command implementations behind the `widthlab` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod fit;
pub mod limits;
pub mod report;
pub mod svg;
pub mod sweep;
