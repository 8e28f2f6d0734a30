pub mod cli;
pub mod data;
pub mod error;
pub mod generative;
pub mod metrics;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod traits;

pub use error::{Error, Result};
