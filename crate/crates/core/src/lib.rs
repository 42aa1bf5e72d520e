pub mod codec;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod probe;
pub mod queue;
pub mod trainer;

pub use error::{Error, Result};
