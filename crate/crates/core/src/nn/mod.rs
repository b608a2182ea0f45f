//! Minimal CPU tensor engine: just enough 3D convolution, pooling,
//! interpolation and optimizer machinery to train the heatmap, segmentation
//! and discriminator networks with explicit, inspectable gradient routing.
//!
//! There is no tape. Every layer exposes `forward` and a matching `backward`
//! that takes an optional gradient sink, so freezing parameters or cutting a
//! gradient path is a visible decision at the call site.

pub mod layers;
pub mod param;
pub mod tensor;

pub use layers::Conv3d;
pub use param::{Adam, Grads, Param, ParamSet};
pub use tensor::Tensor;
