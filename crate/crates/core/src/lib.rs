//! Exact numerical analysis of a FIFO single-server queue fed by several
//! correlated batch Markovian arrival streams with class-dependent
//! service times.

pub mod catalog;
pub mod coefficients;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod model;
pub mod modelfile;
pub mod multi_index;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};
