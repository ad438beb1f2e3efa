pub mod audit;
pub mod blocks;
pub mod data;
mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imageio;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod real;
pub mod reference;
pub mod tape;
mod tensor;
pub mod train;
pub mod tensorio;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
pub use tensor::Tensor;
