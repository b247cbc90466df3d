//! A small neural-network engine: 1x1 convolutions, fully-connected layers,
//! ReLU, softmax cross-entropy, SGD with momentum and Xavier initialization.
//!
//! Activations travel as `[batch, features]` matrices. Spatial inputs are
//! flattened cell-major with channels innermost, so a 1x1 convolution is a
//! matrix product over `[batch * cells, channels]`.

mod init;
mod layers;
mod loss;
mod optim;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use init::{xavier_bound, xavier_init, xavier_uniform};
pub use layers::{Affine, Layer, LayerSpec, Sequential, SequentialGrads};
pub use loss::{softmax_ce, softmax_ce_batch, softmax_probability};
pub use optim::Sgd;

/// Floating-point element type the engine runs on. Training uses `f32`;
/// gradient checking runs the same graph in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
