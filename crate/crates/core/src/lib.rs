pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod io_util;
pub mod lrp;
pub mod model;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
