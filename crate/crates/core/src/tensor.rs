//! Dense row-major tensors and the scalar abstraction used across the crate.
//!
//! A [`Tensor`] is an immutable value: clones share the underlying buffer, so
//! passing tensors into gradient closures is cheap. The optional [`NodeRef`]
//! ties a tensor to the tape that produced it; tensors built directly from
//! data carry no node and act as constants under differentiation.

use std::fmt;
use std::sync::Arc;

use smallvec::SmallVec;
use thiserror::Error;

/// Tensor extents. Rank is 1 or 2 everywhere in this crate, so two inline
/// slots avoid heap traffic on the hot path.
pub type Shape = SmallVec<[usize; 2]>;

/// Scalar types the numeric core is instantiated with: `f32` for training
/// and inference, `f64` for gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from `f64` for constants and hyperparameters.
    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: tensor was recorded on a different tape")]
    TapeMismatch { op: &'static str },
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("backward root must be scalar-valued, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

/// Handle into a specific tape. The `tape` id guards against stale handles
/// leaking from a dropped tape into a fresh one.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

/// Immutable dense tensor. Equality compares shape and data bitwise and
/// ignores tape bookkeeping.
#[derive(Clone)]
pub struct Tensor<F> {
    shape: Shape,
    data: Arc<[F]>,
    pub(crate) node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: Shape::from_slice(shape),
            data: data.into(),
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Arc<[F]>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<F>) -> Self {
        let shape = Shape::from_slice(&[data.len()]);
        Self {
            shape,
            data: data.into(),
            node: None,
        }
    }

    /// Rank-2 tensor with `rows * cols` row-major entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(v: F) -> Self {
        Self::vector(vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: Shape::from_slice(shape),
            data: vec![F::zero(); numel].into(),
            node: None,
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: Shape::from_slice(shape),
            data: vec![v; numel].into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<[F]> {
        Arc::clone(&self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor. Panics when the tensor has more than one entry.
    pub fn item(&self) -> F {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// (rows, cols) when rank-2.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row_slice(&self, i: usize) -> &[F] {
        let (rows, cols) = self.dims2().expect("row_slice requires rank-2 tensor");
        assert!(i < rows, "row {i} out of range for {rows} rows");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Precision conversion; the result is a constant (detached from any tape).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::of_f64(v.to_f64_lossy()))
                .collect::<Vec<G>>()
                .into(),
            node: None,
        }
    }

    /// Copy with one entry bumped by `delta`; used by finite differencing.
    pub fn with_bumped(&self, index: usize, delta: F) -> Self {
        let mut data = self.data.to_vec();
        data[index] = data[index] + delta;
        Self {
            shape: self.shape.clone(),
            data: data.into(),
            node: None,
        }
    }

    /// Copy detached from any tape.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }
}

impl<F: Scalar> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape.as_slice())?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

pub(crate) fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Unrolled dot product; the bulk of forward and backward time is spent here.
pub(crate) fn dot_slices<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        tail = tail + *x * *y;
    }
    let pair = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (pair[0] + pair[1]) + (pair[2] + pair[3]) + tail
}

/// y += alpha * x
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_agreement_is_enforced() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn row_slice_views_rows() {
        let t = Tensor::matrix(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row_slice(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row_slice(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn cast_roundtrips_f32_exactly() {
        let t = Tensor::vector(vec![1.5f32, -2.25, 3.0e-7]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.25 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot_slices(&a, &b) - naive).abs() < 1e-12);
    }
}
