//! k-sparse submodular function minimization.

pub mod cli;
pub mod config;
pub mod error;
pub mod lovasz;
pub mod meta;
pub mod oracle_core;
pub mod parallel_solver;
pub mod ring_family;
pub mod sequential_solver;
pub mod simplex;

pub use error::{Result, SfmError};
pub use oracle_core::{InstanceSpec, QueryLedger, SetFunction, Subset};
