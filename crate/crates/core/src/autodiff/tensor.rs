use serde::{Deserialize, Serialize};

use super::GraphError;

/// Dense row-major tensor of `f64` values.
///
/// Every dimension is at least one; a scalar is represented with shape `[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(GraphError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GraphError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dims must be >= 1, got {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from a shape and a generator over the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for row in rows {
            if row.len() != ncols {
                return Err(GraphError::DataLength {
                    shape: vec![rows.len(), ncols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, GraphError> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || len != self.data.len() {
            return Err(GraphError::InvalidShape { shape });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {i} out of bounds for dim {d}");
        acc * d + i
    })
}

/// Numpy-style broadcast of two shapes aligned on trailing dimensions.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed inside `out` (zero stride on broadcast dims).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of broadcast shape `out` back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, grad.shape());
    let mut res = Tensor::zeros(shape);
    let zeros = vec![0; grad.ndim()];
    for_each_broadcast(grad.shape(), &strides, &zeros, |o, i, _| {
        res.data[i] += grad.data[o];
    });
    res
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
