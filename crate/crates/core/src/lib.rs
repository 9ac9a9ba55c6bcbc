pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod numeric;
pub mod sampler;
pub mod tasks;

pub use error::{Error, Result};
