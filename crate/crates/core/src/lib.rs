//! Metadata-augmented microscaling (M²XFP) quantization.
//!
//! Baseline MX codecs (MXFP4, NVFP4, SMX4), the element- and subgroup-level
//! metadata strategies (Elem-EM, Sg-EM, Sg-EE) with fixed or adaptive shared
//! scale, the three-stream packed layout and container file, a bit-exact
//! behavioral model of the metadata-aware GEMM datapath, and the
//! MSE-versus-bit-width design space exploration harness.

pub mod config;
pub mod dse;
pub mod engine;
pub mod numerics;
pub mod oracle;
pub mod packing;
pub mod quantizer;
pub mod scaling;

pub use config::{ConfigError, Format, GroupConfig, MetaKind, TensorRole};
pub use numerics::{Code, MiniFloatSpec, FP4_E2M1, FP6_E2M3, FP8_E4M3, INT3};
pub use quantizer::{dequantize, group_mse, quantize, QuantError, QuantGroup};
pub use packing::{PackError, PackedTensor, QuantizeOptions};
pub use scaling::ScaleRule;
