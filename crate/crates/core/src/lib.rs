pub mod attacks;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod lab;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod threats;

pub use error::{Error, Result};
pub use tensor::Tensor;
