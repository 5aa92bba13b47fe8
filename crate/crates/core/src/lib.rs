pub mod error;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod scene;

pub use error::{Error, Result};
pub mod decoder;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod topology;
