pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod train;

pub use error::{Result, RobError};
