pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SohotError};
