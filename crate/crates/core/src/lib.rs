//! Differentiable affine image warping.
//!
//! Three samplers are provided behind a common interface:
//!
//! * plain bilinear sampling, whose gradient only sees the four nearest pixels;
//! * a multi-scale baseline that averages bilinear samples of a Gaussian pyramid;
//! * linearized multi-sampling, which fits a local linear intensity model to
//!   random auxiliary samples around every query and differentiates that model.
//!
//! The [`harness`] module drives image-alignment experiments on top of these.

pub mod autograd;
pub mod error;
pub mod harness;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod transform;

pub use error::{Error, Result};
pub use raster::{Image, NormCoord};
pub use sampler::{LinearizationConfig, PixelLinearization, SampledOutput, SamplerKind, SigmaPolicy};
pub use transform::AffineParams;
