//! Compositional decay for a small vision transformer: model, regularizers,
//! training loop, W4A4 fake quantization and alignment diagnostics.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod pairs;
pub mod quant;
pub mod regularizers;
pub mod tensor_io;

pub use error::{Error, Result};
