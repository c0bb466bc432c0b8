//! Correctness, benchmark and convergence harness for the `fusekit` kernels.

pub mod baseline;
pub mod bench;
pub mod config;
pub mod converge;
pub mod data;
pub mod error;
pub mod kernels;
pub mod record;
pub mod report;
pub mod stats;
pub mod suite;

pub use config::Config;
pub use error::{BenchError, Result};
pub use kernels::KernelTable;
