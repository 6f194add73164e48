//! Perspective-aware crowd density maps and iterative density-aware
//! distillation, end to end: synthetic annotated scenes, four density map
//! generators, a small dual-head convolutional regressor with hand-written
//! backprop, the shrinking-kernel distillation driver, and counting metrics.

pub mod annotations;
pub mod density;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod regressor;
pub mod tensor;

pub use error::{Error, Result};
