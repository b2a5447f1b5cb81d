// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cast_loss;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod crop;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod train;
pub mod viz;

pub use autodiff::Tensor;
pub use config::RunConfig;
pub use error::{CastError, Result};
