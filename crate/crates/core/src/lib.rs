//! Bag-of-Queries global descriptors for visual place recognition.

pub mod error;
pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
