pub mod bfn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod instruct;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod toar;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
