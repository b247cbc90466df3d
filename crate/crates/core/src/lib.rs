//! Salient object detection by querying each superpixel against an encoded
//! low-level distance map fused with high-level CNN features.
//!
//! The pipeline: [`slic`] superpixels, [`features`] per region, the
//! [`eldmap`] grid distance map for every query region, an optional
//! [`backbone`] feature map, and the trainable [`model`]. [`eval`] holds the
//! precision/recall/F-measure/MAE protocol.

pub mod backbone;
pub mod color;
pub mod dataset;
pub mod eldmap;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predict;
pub mod slic;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
