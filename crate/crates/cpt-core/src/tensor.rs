//! Dense row-major n-dimensional array.

use crate::elem::Elem;
use crate::error::{Error, Result};

/// A dense tensor. `shape.iter().product() == data.len()` always holds;
/// construction through [`Tensor::new`] enforces it.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Elem> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Elem> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Element at a multi-index. Intended for tests and small hosts; hot
    /// paths work on the flat slice directly.
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy conversion, used by metrics and report formatting.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| Elem::to_f64(v)).collect()
    }
}

impl<S: Elem> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&S> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor{:?} {:?}{}",
            self.shape,
            preview,
            if self.data.len() > 8 { " ..." } else { "" }
        )
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Shape of the result of broadcasting `a` against `b` under the usual
/// right-aligned rules (a length-1 axis stretches to match).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} against {:?}", a, b),
            ));
        };
    }
    Ok(out)
}

/// Splits `shape` at `axis` into (outer, len, inner) extents so that the flat
/// offset of element `(o, j, i)` along the axis is `(o * len + j) * inner + i`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    debug_assert!(axis < shape.len());
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
