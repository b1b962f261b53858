pub mod blocks;
pub mod checks;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fem;
pub mod fifm;
pub mod kv;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod train;

mod binio;

pub use error::{Error, Result};
pub use tensor::Tensor;
