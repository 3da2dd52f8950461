//! Adaptive dilated convolution: a convolution whose per-channel-group
//! fractional dilation rates are regressed from its input, with analytic
//! gradients, integer-rate reference oracles and a small synthetic
//! experiment harness.

pub mod adc;
pub mod bench;
pub mod drm;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod reference;
pub mod sampler;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use error::{AdcError, Result};
pub use tensor::{Matrix, Tensor4};
