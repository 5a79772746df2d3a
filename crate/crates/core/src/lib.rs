pub mod autodiff;
pub mod cli;
pub mod cesa;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod profile;
pub mod rdtb;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
