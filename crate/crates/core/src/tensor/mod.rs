//! Dense row-major tensors plus a tape for reverse-mode differentiation.
//!
//! `Tensor<E>` is a plain value: shape and contiguous storage. All gradient
//! machinery lives in [`Tape`]: operations append nodes, `backward` walks the
//! record in reverse. Compute precision is chosen by instantiating with `f32`
//! (training default) or `f64` (gradient checking).

mod gradcheck;
mod kernels;
pub use kernels::{IM_NANOS, MM_NANOS, NN_NANOS, NT_NANOS, TN_NANOS}; // TEMPORARY tuning counters
mod tape;

pub use gradcheck::{
    gradcheck, gradcheck_corrupt, registry, run_registry, GradcheckOutcome, GradcheckReport,
    OpCheck, DEFAULT_EPS, DEFAULT_TOL, MODEL_TOL,
};
pub use kernels::PoolKind;
pub use tape::{GradMap, Tape, Var};

use num_traits::{Float, FromPrimitive, NumCast};
use std::fmt;

/// Scalar element type for every tensor in the crate.
pub trait Elem:
    Float + FromPrimitive + NumCast + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;
}
impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// Storage precision tag, used by checkpoint serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Convert an `f64` constant into the active element type.
pub fn elem<E: Elem>(v: f64) -> E {
    E::from_f64(v).expect("constant representable in element type")
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. Storage is always contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "tensor_new",
                format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Scalar view of a 0-d or single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor with {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type. Exact for f32 -> f64.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }
}
