pub mod baselines;
pub mod bundle;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod physics;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
