//! Mixture-of-experts transformer inference with weight-only int8/int4
//! expert quantization, sort-based token routing, grouped expert GEMMs and
//! batch pruning.

pub mod bench;
pub mod checkpoint;
pub mod dequant;
pub mod error;
pub mod grouped_gemm;
pub mod half_float;
pub mod model;
pub mod oracle;
pub mod quantizer;
pub mod router;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use half_float::Half;
