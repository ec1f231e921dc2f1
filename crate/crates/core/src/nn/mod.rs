//! Small-tensor CNN core: layer kernels with hand-written backward passes,
//! plain SGD with per-group learning rates, finite-difference checking and a
//! binary weight format.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks run the same code in `f64`.

mod gradcheck;
mod kernels;
pub mod layers;
mod network;
mod weights;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{gradient_check, numeric_gradient, relative_error};
pub use network::{
    batch_gradient, sgd_step, BatchStats, Grads, LayerKind, LayerSpec, LrGroup, LrMap, Mode, Network, Param, ParamSlot,
    Params, Trace,
};
pub use weights::{load_weights, save_weights, LoadOptions, WEIGHT_MAGIC, WEIGHT_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {0} has no cached forward activations")]
    MissingForwardCache(usize),
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("weight file does not start with HSSW")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("weight file ends early")]
    TruncatedFile,
    #[error("weight file is malformed: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Floating-point element type shared by training (`f32`) and gradient
/// checks (`f64`).
pub trait Scalar:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + AddAssign + MulAssign + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn lit(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// SplitMix64 finalizer; derives independent seeds from `(base, index)`.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
