pub mod adam;
pub mod affine;
pub mod autodiff;
pub mod block;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod io;
pub mod linalg;
pub mod optimizer;
pub mod quant;
pub mod suites;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::PrecisionScheme;
pub use tensor::{Precision, Tensor};
