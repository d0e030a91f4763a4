pub mod autodiff;
pub mod cli;
pub mod error;
pub mod lsf;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pinn;
pub mod roi;
pub mod signal;
pub mod supinn;

pub use error::{Error, Result};
