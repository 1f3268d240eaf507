pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod node;
pub mod pipeline;
pub mod seed;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
