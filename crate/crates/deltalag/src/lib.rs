pub mod data;
pub mod error;
pub mod baselines;
pub mod cli;
pub mod eval;
pub mod losses;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
