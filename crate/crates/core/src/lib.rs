pub mod cli;
pub mod couplings;
pub mod error;
pub mod estimators;
pub mod jumps;
pub mod kv;
pub mod measures;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
