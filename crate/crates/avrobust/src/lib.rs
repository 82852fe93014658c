pub mod attacks;
pub mod audiofeat;
pub mod models;
pub mod diffengine;
pub mod error;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
