//! Additive null-space outlier suppression for low-bit weight quantization.
//!
//! The crate covers the whole desk-scale pipeline: a toy decoder-only
//! transformer with calibration taps, Hessian accumulation, null-space
//! extraction, closed-form absorption and uniform quantization with a
//! round-to-nearest and an error-compensated backend.

pub mod absorb;
pub mod corpus;
pub mod hessian;
pub mod linalg;
pub mod nullspace;
pub mod pipeline;
pub mod quantizer;
pub mod scalar;
pub mod tensorstore;
pub mod toymodel;

pub use absorb::{absorb_layer, AbsorbConfig, AbsorbResult, Temperature};
pub use hessian::HessianAccumulator;
pub use linalg::{Matrix, Rng};
pub use nullspace::{extract_nullspace, KRule, NullSpaceBasis};
pub use quantizer::{quantize, Backend, QuantConfig, QuantizedTensor};
pub use scalar::Real;
pub use toymodel::{LayerWeights, ModelConfig};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Model64 = LayerWeights<f64>;
pub type Model32 = LayerWeights<f32>;
pub type NullSpace64 = NullSpaceBasis<f64>;
pub type Quantized64 = QuantizedTensor<f64>;
