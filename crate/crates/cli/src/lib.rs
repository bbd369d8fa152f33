//! Library side of the `equivar` command-line tool.

pub mod config;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod train;
pub mod verify;
