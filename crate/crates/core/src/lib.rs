//! Calibration-free post-training quantization of weight tensors.
//!
//! The pipeline classifies each weight of a 2-D tensor as *salient* or
//! *common* with a soft-threshold rule whose level is chosen so that exactly
//! the requested fraction of weights survives, then quantizes both classes
//! with row-wise group minmax quantization at independent bit-widths. No
//! calibration data is involved anywhere: the classification depends only on
//! the weight magnitudes.
//!
//! Modules:
//! - [`tensor`]: the in-memory weight tensor and container types
//! - [`io`]: the WTS1 binary container format
//! - [`synth`]: seeded synthetic tensor generation
//! - [`saliency`]: soft-threshold classification and threshold selection
//! - [`quantizer`]: group minmax quantization, clipping, RTN baseline
//! - [`packing`]: the PCQ1 packed artifact format and bits-per-weight accounting
//! - [`diagnostics`]: KL divergence estimators, error metrics, and numerical
//!   checks of the divergence approximation claims
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature
//! (default) is enabled and fall back to sequential iteration otherwise.
//! Results are bit-identical either way.

pub mod diagnostics;
pub mod io;
pub mod packing;
mod parallel;
pub mod quantizer;
pub mod saliency;
pub mod synth;
pub mod tensor;

pub use diagnostics::MetricsReport;
pub use quantizer::{ClipScope, QuantConfig, QuantizedTensor};
pub use saliency::SaliencyMask;
pub use synth::Distribution;
pub use tensor::{TensorContainer, WeightTensor};
