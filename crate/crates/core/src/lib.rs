pub mod cli;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod models;
pub mod rotations;
pub mod signal;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
