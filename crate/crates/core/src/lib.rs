pub mod agent;
pub mod data;
pub mod error;
pub mod experiment;
mod fsutil;
pub mod gradcheck;
pub mod learner;
pub mod nn;
pub mod rng;
pub mod strategies;

pub use error::{DralError, Result};
pub use fsutil::write_atomic;
