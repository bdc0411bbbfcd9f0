pub mod align;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
