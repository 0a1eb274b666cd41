pub mod checks;
pub mod cli;
pub mod data;
pub mod equinet;
pub mod error;
pub mod geometry;
pub mod matcher;
pub mod params;
pub mod refine;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
