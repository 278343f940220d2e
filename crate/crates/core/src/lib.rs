pub mod error;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub mod config;
pub mod data;
pub mod decoder;
pub mod docid;
pub mod eval;
pub mod expansion;
pub mod features;
pub mod fusion;
pub mod representation;
pub mod synth;
pub mod train;
