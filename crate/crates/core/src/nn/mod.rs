//! Minimal CPU neural-network kernels: convolution, batch normalization,
//! pooling, bilinear resampling, and SGD. Everything is f32 with f64
//! accumulation where it matters for reproducibility of the statistics.

pub mod conv;
pub mod init;
pub mod norm;
pub mod ops;
pub mod param;
pub mod sgd;

pub use conv::Conv2d;
pub use norm::{BatchNorm2d, BnCache};
pub use param::Param;
pub use sgd::Sgd;

/// Activations are always `[batch, channels, height, width]`.
pub type Feat = ndarray::Array4<f32>;
