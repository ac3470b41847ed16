pub mod adapters;
pub mod compactor;
pub mod error;
pub mod generator;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
