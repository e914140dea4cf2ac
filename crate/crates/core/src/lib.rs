pub mod autograd;
pub mod confnet;
pub mod denet;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
