//! Dense multi-dimensional arrays with reverse-mode differentiation.
//!
//! The op set is fixed to what the predictor needs: 2-D convolution,
//! pointwise tanh/sigmoid, add, scalar multiply, channel concat, global
//! average pooling, dense (matrix-vector), grid broadcast, and MSE loss.
//! There is no shape broadcasting; all alignment is explicit.

mod params;
mod tape;
mod wire;

pub mod gradcheck;

pub use params::ParameterSet;
pub use tape::{Gradients, Tape, ValueId};
pub use wire::{from_bytes, read_tensor, to_bytes, write_tensor};

use thiserror::Error;

/// Scalar storage type. `f64` by default; the `f32` feature switches the
/// whole crate to 32-bit for speed runs (test tolerances assume `f64`).
#[cfg(feature = "f32")]
pub type Scalar = f32;
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;

/// Wire-format tag for the active scalar type.
pub const DTYPE: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?} ({expected} scalars)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("duplicate leaf name {0:?}")]
    DuplicateName(String),
    #[error("convolution kernel extent must be odd, got {0}")]
    EvenKernel(usize),
    #[error("parameter slice {0:?} not found")]
    MissingSlice(String),
    #[error("malformed tensor stream: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array. The shape product always equals the data length
/// and every entry is finite; both are enforced at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "Tensor::new".into(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: Scalar) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, bound: Scalar, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} entries", self.data.len());
        self.data[0]
    }

    /// Same data reinterpreted under a new shape of equal product.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn l2_norm(&self) -> Scalar {
        self.data.iter().map(|v| v * v).sum::<Scalar>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new(vec![2], vec![1.0, Scalar::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }
}
