//! Dual-branch few-shot class-incremental learning for SAR-like imagery.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod protocol;
pub mod prototype;
pub mod rng;
pub mod selfcheck;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ComplexTensor, Tensor};
