pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod miprobe;
pub mod nn;
pub mod revertlm;
pub mod runner;
pub mod splitproto;
pub mod tinylm;

pub use error::{Error, Result};
