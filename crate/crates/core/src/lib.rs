pub mod augment;
pub mod cli;
pub mod codec;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
