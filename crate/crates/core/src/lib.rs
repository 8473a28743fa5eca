pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod mining;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;

pub use error::{Error, Result};
